//! Full-batch training by reverse-mode backpropagation, plus the pruning and
//! fine-tuning attacks.

use nalgebra::{DMatrix, RowDVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{Architecture, EmbeddingModel, GnnModel, ModelSpec, SAGE_DROPOUT};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::seed::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Optimizer {
    GradientDescent,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    pub seed: u64,
    /// Rescale the full gradient to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(epochs: usize, learning_rate: f64, seed: u64) -> Self {
        Self {
            epochs,
            learning_rate,
            optimizer: Optimizer::adam(),
            seed,
            clip_norm: Some(5.0),
        }
    }

    fn validate(&self, allow_zero: bool) -> Result<()> {
        if self.epochs == 0 && !allow_zero {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0) || (!allow_zero && self.learning_rate == 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// What the network output is trained against.
#[derive(Debug, Clone, Copy)]
pub enum Supervision<'a> {
    /// Regress embeddings directly onto `d × n` targets (MSE).
    Embeddings(&'a [DMatrix<f64>]),
    /// MSE on `k × n` node targets through a linear head.
    NodeRegression(&'a [DMatrix<f64>]),
    /// Logistic loss on binary node labels through a linear head.
    NodeBinary(&'a [Vec<bool>]),
}

impl Supervision<'_> {
    fn len(&self) -> usize {
        match self {
            Supervision::Embeddings(t) | Supervision::NodeRegression(t) => t.len(),
            Supervision::NodeBinary(l) => l.len(),
        }
    }

    fn head_dim(&self) -> Option<usize> {
        match self {
            Supervision::Embeddings(_) => None,
            Supervision::NodeRegression(t) => Some(t.first().map_or(1, |m| m.nrows())),
            Supervision::NodeBinary(_) => Some(1),
        }
    }
}

/// Linear task head `y = h·W + b`, discarded after training.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: DMatrix<f64>,
    pub bias: RowDVector<f64>,
}

impl Head {
    fn init(dim_in: usize, dim_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (dim_in + dim_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
        Self {
            weight: DMatrix::from_fn(dim_in, dim_out, |_, _| dist.sample(rng)),
            bias: RowDVector::zeros(dim_out),
        }
    }

    fn apply(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = h * &self.weight;
        for mut row in y.row_iter_mut() {
            row += &self.bias;
        }
        y
    }

    fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        let (r, c) = self.weight.shape();
        (0..r)
            .flat_map(move |i| (0..c).map(move |j| self.weight[(i, j)]))
            .chain(self.bias.iter().copied())
    }

    fn num_parameters(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn set_parameters(&mut self, p: &[f64]) {
        let (r, c) = self.weight.shape();
        for i in 0..r {
            for j in 0..c {
                self.weight[(i, j)] = p[i * c + j];
            }
        }
        for (k, b) in self.bias.iter_mut().enumerate() {
            *b = p[r * c + k];
        }
    }

    /// Binary predictions `logit > 0`.
    pub fn predict_binary(&self, h: &DMatrix<f64>) -> Vec<bool> {
        self.apply(h).column(0).iter().map(|v| *v > 0.0).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GnnModel,
    pub head: Option<Head>,
    /// Evaluation loss before training and after each epoch.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    /// Loss of the returned parameters.
    pub fn final_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

struct Cache {
    inputs: Vec<DMatrix<f64>>,
    aggs: Vec<DMatrix<f64>>,
    pres: Vec<DMatrix<f64>>,
    drops: Vec<Option<DMatrix<f64>>>,
}

fn forward_cached(
    model: &GnnModel,
    prop: &DMatrix<f64>,
    x: &DMatrix<f64>,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> (DMatrix<f64>, Cache) {
    let last = model.layers.len() - 1;
    let mut cache = Cache {
        inputs: Vec::with_capacity(last + 1),
        aggs: Vec::with_capacity(last + 1),
        pres: Vec::with_capacity(last + 1),
        drops: Vec::with_capacity(last + 1),
    };
    let mut h = x.clone();
    for (l, layer) in model.layers.iter().enumerate() {
        let (agg, z) = layer.pre_activation(prop, &h);
        cache.inputs.push(h);
        cache.aggs.push(agg);
        h = if l < last {
            let mut a = z.map(|v| model.activation.apply(v));
            let mask = match (&mut dropout, model.architecture) {
                (Some(rng), Architecture::Sage) => {
                    let keep = 1.0 - SAGE_DROPOUT;
                    let m = DMatrix::from_fn(a.nrows(), a.ncols(), |_, _| {
                        if rng.random::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    });
                    a.component_mul_assign(&m);
                    Some(m)
                }
                _ => None,
            };
            cache.drops.push(mask);
            a
        } else {
            cache.drops.push(None);
            z.clone()
        };
        cache.pres.push(z);
    }
    (h, cache)
}

/// Gradient in [`GnnModel::parameters`] order.
fn backward(model: &GnnModel, prop: &DMatrix<f64>, cache: &Cache, d_out: DMatrix<f64>) -> Vec<f64> {
    let last = model.layers.len() - 1;
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); model.layers.len()];
    let mut d = d_out;
    for l in (0..=last).rev() {
        let layer = &model.layers[l];
        if l < last {
            let act = model.activation;
            d.zip_apply(&cache.pres[l], |dv, z| *dv *= act.derivative(z));
            if let Some(mask) = &cache.drops[l] {
                d.component_mul_assign(mask);
            }
        }
        let mut g = Vec::new();
        super::push_row_major(&mut g, &(cache.aggs[l].transpose() * &d));
        if layer.root_weight.is_some() {
            super::push_row_major(&mut g, &(cache.inputs[l].transpose() * &d));
        }
        if layer.bias.is_some() {
            g.extend(d.row_sum().iter());
        }
        per_layer[l] = g;
        if l > 0 {
            let mut dh = prop.transpose() * (&d * layer.weight.transpose());
            if let Some(root) = &layer.root_weight {
                dh += &d * root.transpose();
            }
            d = dh;
        }
    }
    per_layer.concat()
}

/// Gradient w.r.t. the network output, and w.r.t. the head parameters.
type OutputGrad = (DMatrix<f64>, Vec<f64>);

struct Batch<'a> {
    graphs: &'a [Graph],
    props: Vec<DMatrix<f64>>,
    sup: Supervision<'a>,
    elements: f64,
}

impl<'a> Batch<'a> {
    fn new(model: &GnnModel, graphs: &'a [Graph], sup: Supervision<'a>) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        if sup.len() != graphs.len() {
            return Err(Error::DimensionMismatch {
                expected: graphs.len(),
                actual: sup.len(),
                context: "targets per graph",
            });
        }
        let d = model.embedding_dim();
        let mut elements = 0.0;
        for (k, g) in graphs.iter().enumerate() {
            model.check_graph(g)?;
            let n = g.num_nodes();
            match sup {
                Supervision::Embeddings(t) => {
                    if t[k].shape() != (d, n) {
                        return Err(Error::DimensionMismatch {
                            expected: d * n,
                            actual: t[k].len(),
                            context: "embedding target shape",
                        });
                    }
                    elements += (d * n) as f64;
                }
                Supervision::NodeRegression(t) => {
                    if t[k].ncols() != n || t[k].nrows() != t[0].nrows() {
                        return Err(Error::DimensionMismatch {
                            expected: n,
                            actual: t[k].ncols(),
                            context: "regression target shape",
                        });
                    }
                    elements += (t[k].nrows() * n) as f64;
                }
                Supervision::NodeBinary(l) => {
                    if l[k].len() != n {
                        return Err(Error::DimensionMismatch {
                            expected: n,
                            actual: l[k].len(),
                            context: "label count",
                        });
                    }
                    elements += n as f64;
                }
            }
        }
        let props = graphs.iter().map(|g| model.architecture.propagation(g)).collect();
        Ok(Self {
            graphs,
            props,
            sup,
            elements,
        })
    }

    /// Loss contribution of graph `k` and its gradient w.r.t. the network
    /// output and the head.
    fn graph_loss(
        &self,
        k: usize,
        out: &DMatrix<f64>,
        head: Option<&Head>,
        want_grad: bool,
    ) -> (f64, Option<OutputGrad>) {
        let scale = 1.0 / self.elements;
        match (self.sup, head) {
            (Supervision::Embeddings(t), _) => {
                let diff = out - t[k].transpose();
                let loss = diff.norm_squared() * scale;
                (loss, want_grad.then(|| (diff * (2.0 * scale), Vec::new())))
            }
            (Supervision::NodeRegression(t), Some(head)) => {
                let diff = head.apply(out) - t[k].transpose();
                let loss = diff.norm_squared() * scale;
                let grads = want_grad.then(|| {
                    let dy = diff * (2.0 * scale);
                    head_grads(head, out, dy)
                });
                (loss, grads)
            }
            (Supervision::NodeBinary(labels), Some(head)) => {
                let logits = head.apply(out);
                let mut loss = 0.0;
                let mut dy = DMatrix::zeros(logits.nrows(), 1);
                for (r, &y) in labels[k].iter().enumerate() {
                    let z = logits[(r, 0)];
                    let y = if y { 1.0 } else { 0.0 };
                    // log(1 + e^z) − y z, stable form.
                    loss += z.max(0.0) - y * z + (-z.abs()).exp().ln_1p();
                    dy[(r, 0)] = (sigmoid(z) - y) * scale;
                }
                (loss * scale, want_grad.then(|| head_grads(head, out, dy)))
            }
            _ => unreachable!("head presence matches supervision"),
        }
    }

    fn evaluate(&self, model: &GnnModel, head: Option<&Head>) -> f64 {
        (0..self.graphs.len())
            .map(|k| {
                let out = model.forward_with(&self.props[k], self.graphs[k].features());
                self.graph_loss(k, &out, head, false).0
            })
            .sum()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Returns (∂L/∂out, ∂L/∂head-params) for `y = out·W + b`.
fn head_grads(head: &Head, out: &DMatrix<f64>, dy: DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let dw = out.transpose() * &dy;
    let mut g = Vec::with_capacity(head.num_parameters());
    super::push_row_major(&mut g, &dw);
    g.extend(dy.row_sum().iter());
    (&dy * head.weight.transpose(), g)
}

/// Loss and gradient over all graphs, model parameters followed by head
/// parameters.
fn loss_and_gradient(
    model: &GnnModel,
    head: Option<&Head>,
    batch: &Batch<'_>,
    rng: &mut ChaCha8Rng,
) -> (f64, Vec<f64>) {
    let np = model.num_parameters();
    let nh = head.map_or(0, Head::num_parameters);
    let mut grad = vec![0.0; np + nh];
    let mut loss = 0.0;
    for k in 0..batch.graphs.len() {
        let (out, cache) = forward_cached(model, &batch.props[k], batch.graphs[k].features(), Some(rng));
        let (l, g) = batch.graph_loss(k, &out, head, true);
        let (d_out, head_g) = g.expect("gradient requested");
        loss += l;
        for (acc, v) in grad[..np]
            .iter_mut()
            .zip(backward(model, &batch.props[k], &cache, d_out))
        {
            *acc += v;
        }
        for (acc, v) in grad[np..].iter_mut().zip(head_g) {
            *acc += v;
        }
    }
    (loss, grad)
}

/// Runs `cfg.epochs` full-batch steps in place. Returns the evaluation loss
/// before training and after each epoch. With `keep_best`, the parameters
/// with the lowest evaluation loss are restored at the end.
fn fit(
    model: &mut GnnModel,
    mut head: Option<&mut Head>,
    batch: &Batch<'_>,
    cfg: &TrainConfig,
    keep_best: bool,
    mut on_epoch: impl FnMut(&GnnModel, Option<&Head>),
) -> Result<Vec<f64>> {
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "dropout", 0));
    let np = model.num_parameters();
    let mut params: Vec<f64> = model.parameters();
    if let Some(h) = head.as_deref() {
        params.extend(h.parameters());
    }
    let mut velocity = vec![0.0; params.len()];
    let mut second = vec![0.0; params.len()];
    let initial = batch.evaluate(model, head.as_deref());
    if !initial.is_finite() {
        return Err(Error::NonFiniteLoss { epoch: 0 });
    }
    let mut losses = vec![initial];
    let mut best = (initial, params.clone());
    on_epoch(model, head.as_deref());
    for epoch in 1..=cfg.epochs {
        let (train_loss, mut grad) = loss_and_gradient(model, head.as_deref(), batch, &mut rng);
        if !train_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if let Some(max) = cfg.clip_norm {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                grad.iter_mut().for_each(|g| *g *= max / norm);
            }
        }
        match cfg.optimizer {
            Optimizer::GradientDescent | Optimizer::Momentum { .. } => {
                let beta = match cfg.optimizer {
                    Optimizer::Momentum { beta } => beta,
                    _ => 0.0,
                };
                for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
                    *v = beta * *v + g;
                    *p -= cfg.learning_rate * *v;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(epoch as i32);
                let c2 = 1.0 - beta2.powi(epoch as i32);
                for (k, g) in grad.iter().enumerate() {
                    velocity[k] = beta1 * velocity[k] + (1.0 - beta1) * g;
                    second[k] = beta2 * second[k] + (1.0 - beta2) * g * g;
                    params[k] -= cfg.learning_rate * (velocity[k] / c1) / ((second[k] / c2).sqrt() + eps);
                }
            }
        }
        model.set_parameters(&params[..np])?;
        if let Some(h) = head.as_deref_mut() {
            h.set_parameters(&params[np..]);
        }
        let eval = batch.evaluate(model, head.as_deref());
        if !eval.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        if eval < best.0 {
            best = (eval, params.clone());
        }
        losses.push(eval);
        on_epoch(model, head.as_deref());
    }
    if keep_best {
        model.set_parameters(&best.1[..np])?;
        if let Some(h) = head {
            h.set_parameters(&best.1[np..]);
        }
    }
    Ok(losses)
}

/// Trains a fresh model of shape `spec`. The returned parameters are the
/// best seen, so the final loss never exceeds the initial loss.
pub fn train(
    spec: &ModelSpec,
    dataset: &[Graph],
    supervision: Supervision<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = GnnModel::init(spec, derive_seed(cfg.seed, "init", 0))?;
    train_from(model, dataset, supervision, cfg)
}

/// Continues training an existing model (a fresh head is drawn when the
/// supervision needs one).
pub fn train_from(
    mut model: GnnModel,
    dataset: &[Graph],
    supervision: Supervision<'_>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate(true)?;
    let batch = Batch::new(&model, dataset, supervision)?;
    let mut head = supervision.head_dim().map(|k| {
        let mut rng = rng_from_seed(derive_seed(cfg.seed, "head", 0));
        Head::init(model.embedding_dim(), k, &mut rng)
    });
    let losses = fit(&mut model, head.as_mut(), &batch, cfg, true, |_, _| {})?;
    Ok(TrainOutcome { model, head, losses })
}

/// Zeros the `fraction` smallest-magnitude weights, counted globally over
/// all layers. Biases are untouched.
pub fn prune(model: &GnnModel, fraction: f64) -> Result<GnnModel> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "prune fraction {fraction} outside [0,1]"
        )));
    }
    let mut params = model.parameters();
    let mask = model.weight_mask();
    let mut idx: Vec<usize> = (0..params.len()).filter(|&k| mask[k]).collect();
    let count = (fraction * idx.len() as f64).round() as usize;
    idx.sort_by(|&a, &b| params[a].abs().total_cmp(&params[b].abs()).then(a.cmp(&b)));
    for &k in &idx[..count] {
        params[k] = 0.0;
    }
    let mut out = model.clone();
    out.set_parameters(&params)?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: GnnModel,
    /// Downstream accuracy of the temporary head, before training and after
    /// each epoch.
    pub accuracy: Vec<f64>,
}

/// Appends a logistic head and trains model and head jointly on binary node
/// labels for `cfg.epochs` epochs; the head is then discarded.
pub fn finetune(
    model: &GnnModel,
    graphs: &[Graph],
    labels: &[Vec<bool>],
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate(true)?;
    let supervision = Supervision::NodeBinary(labels);
    let mut tuned = model.clone();
    let batch = Batch::new(&tuned, graphs, supervision)?;
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "head", 0));
    let mut head = Head::init(tuned.embedding_dim(), 1, &mut rng);
    let mut accuracy = Vec::with_capacity(cfg.epochs + 1);
    fit(&mut tuned, Some(&mut head), &batch, cfg, false, |m, h| {
        let h = h.expect("finetune head");
        let (mut correct, mut total) = (0usize, 0usize);
        for (g, y) in graphs.iter().zip(labels) {
            let out = m.forward_rows(g).expect("validated graph");
            for (p, t) in h.predict_binary(&out).iter().zip(y) {
                correct += usize::from(p == t);
                total += 1;
            }
        }
        accuracy.push(correct as f64 / total as f64);
    })?;
    Ok(FinetuneOutcome { model: tuned, accuracy })
}

/// Mean over graphs of `‖H_a − H_b‖_F / ‖H_b‖_F`.
pub fn relative_error(model: &dyn EmbeddingModel, reference: &dyn EmbeddingModel, graphs: &[Graph]) -> Result<f64> {
    if model.embedding_dim() != reference.embedding_dim() {
        return Err(Error::DimensionMismatch {
            expected: reference.embedding_dim(),
            actual: model.embedding_dim(),
            context: "relative error dims",
        });
    }
    if graphs.is_empty() {
        return Err(Error::InvalidArgument("no graphs to compare on".into()));
    }
    let mut total = 0.0;
    for g in graphs {
        let a = model.embed(g)?;
        let b = reference.embed(g)?;
        total += (a - &b).norm() / b.norm().max(f64::MIN_POSITIVE);
    }
    Ok(total / graphs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{Activation, Layer};
    use crate::graph::{generate_dataset, DatasetSpec, EdgeModel, FeatureModel};

    fn graphs(num: usize, n: usize, dim: usize, seed: u64) -> Vec<Graph> {
        generate_dataset(&DatasetSpec {
            num_graphs: num,
            nodes_per_graph: (n, n),
            feature_dim: dim,
            edge_model: EdgeModel::ErdosRenyi { p: 0.4 },
            feature_model: FeatureModel::StandardNormal,
            seed,
        })
        .unwrap()
    }

    fn embedding_loss(model: &GnnModel, g: &Graph, target: &DMatrix<f64>) -> f64 {
        (model.embed(g).unwrap() - target).norm_squared() / target.len() as f64
    }

    /// Central-difference check of the backpropagated gradient on a 3-node
    /// graph, 10 coordinates per layer.
    #[test]
    fn backprop_matches_finite_differences() {
        let g = graphs(1, 3, 4, 31).remove(0);
        for arch in Architecture::ALL {
            for act in [Activation::Tanh, Activation::Relu] {
                let mut spec = ModelSpec::new(arch, 4, 3);
                spec.activation = act;
                spec.hidden_dim = 5;
                let mut model = GnnModel::init(&spec, 77).unwrap();
                // Nonzero biases exercise the bias path.
                let mut p = model.parameters();
                let mask = model.weight_mask();
                for (k, v) in p.iter_mut().enumerate() {
                    if !mask[k] {
                        *v = 0.1 * ((k % 7) as f64 - 3.0);
                    }
                }
                model.set_parameters(&p).unwrap();
                let target = DMatrix::from_fn(3, 3, |r, c| ((r + 2 * c) as f64).sin());
                let targets = [target.clone()];
                let batch = Batch::new(&model, std::slice::from_ref(&g), Supervision::Embeddings(&targets)).unwrap();
                let prop = arch.propagation(&g);
                let (out, cache) = forward_cached(&model, &prop, g.features(), None);
                let (_, grads) = batch.graph_loss(0, &out, None, true);
                let analytic = backward(&model, &prop, &cache, grads.unwrap().0);

                let mut offset = 0;
                let mut rng = rng_from_seed(5);
                for layer in model.layers() {
                    let size = layer.weight.len()
                        + layer.root_weight.as_ref().map_or(0, |r| r.len())
                        + layer.bias.as_ref().map_or(0, |b| b.len());
                    for _ in 0..10 {
                        let k = offset + rng.random_range(0..size);
                        let h = 1e-6;
                        let mut plus = model.clone();
                        let mut pp = p.clone();
                        pp[k] += h;
                        plus.set_parameters(&pp).unwrap();
                        let mut minus = model.clone();
                        pp[k] -= 2.0 * h;
                        minus.set_parameters(&pp).unwrap();
                        let fd = (embedding_loss(&plus, &g, &target) - embedding_loss(&minus, &g, &target)) / (2.0 * h);
                        let denom = fd.abs().max(analytic[k].abs()).max(1e-8);
                        assert!(
                            (fd - analytic[k]).abs() / denom < 1e-4,
                            "{arch:?}/{act:?} param {k}: fd {fd} vs analytic {}",
                            analytic[k]
                        );
                    }
                    offset += size;
                }
            }
        }
    }

    #[test]
    fn zero_epochs_at_fixed_point_has_zero_loss() {
        let gs = graphs(1, 4, 3, 2);
        let model = GnnModel::init(&ModelSpec::new(Architecture::Gcn, 3, 4), 8).unwrap();
        let targets = vec![model.embed(&gs[0]).unwrap()];
        let cfg = TrainConfig::new(0, 0.1, 1);
        let out = train_from(model.clone(), &gs, Supervision::Embeddings(&targets), &cfg).unwrap();
        assert!(out.final_loss() < 1e-24);
        assert_eq!(out.model, model);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let gs = graphs(12, 6, 4, 3);
        let teacher = GnnModel::init(&ModelSpec::new(Architecture::Gcn, 4, 4), 100).unwrap();
        let targets: Vec<_> = gs.iter().map(|g| teacher.embed(g).unwrap()).collect();
        for arch in Architecture::ALL {
            let cfg = TrainConfig::new(30, 0.05, 9);
            let spec = ModelSpec::new(arch, 4, 4);
            let a = train(&spec, &gs, Supervision::Embeddings(&targets), &cfg).unwrap();
            let b = train(&spec, &gs, Supervision::Embeddings(&targets), &cfg).unwrap();
            assert!(a.final_loss() <= a.initial_loss());
            assert!(a.final_loss() < 0.8 * a.initial_loss(), "{arch:?}: {:?}", a.losses);
            assert_eq!(a.model.parameters(), b.model.parameters());
        }
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let gs = graphs(2, 4, 3, 4);
        let spec = ModelSpec::new(Architecture::Gin, 3, 4);
        let wrong = vec![DMatrix::zeros(5, 4); 2];
        let cfg = TrainConfig::new(5, 0.1, 0);
        assert!(matches!(
            train(&spec, &gs, Supervision::Embeddings(&wrong), &cfg),
            Err(Error::DimensionMismatch { .. })
        ));
        let bad_lr = TrainConfig::new(5, -1.0, 0);
        let ok = vec![DMatrix::zeros(4, 4); 2];
        assert!(train(&spec, &gs, Supervision::Embeddings(&ok), &bad_lr).is_err());
        let huge: Vec<_> = ok.iter().map(|m| m.map(|_| 1e300)).collect();
        let mut no_clip = TrainConfig::new(5, 1.0, 0);
        no_clip.clip_norm = None;
        assert!(matches!(
            train(&spec, &gs, Supervision::Embeddings(&huge), &no_clip),
            Err(Error::NonFiniteLoss { .. })
        ));
    }

    #[test]
    fn prune_examples() {
        let layer = Layer {
            weight: DMatrix::from_row_slice(2, 2, &[0.1, -0.2, 0.3, -0.4]),
            root_weight: None,
            bias: None,
        };
        let m = GnnModel::from_layers(Architecture::Gcn, Activation::Relu, vec![layer]).unwrap();
        assert_eq!(prune(&m, 0.0).unwrap(), m);
        assert_eq!(prune(&m, 0.5).unwrap().parameters(), vec![0.0, 0.0, 0.3, -0.4]);
        assert!(prune(&m, 1.2).is_err());

        let mut spec = ModelSpec::new(Architecture::Sage, 3, 4);
        spec.bias = false;
        let full = GnnModel::init(&spec, 1).unwrap();
        let zeroed = prune(&full, 1.0).unwrap();
        assert!(zeroed.parameters().iter().all(|v| *v == 0.0));
        let g = &graphs(1, 5, 3, 0)[0];
        assert!(zeroed.embed(g).unwrap().iter().all(|v| *v == 0.0));
        // Input untouched.
        assert!(full.parameters().iter().any(|v| *v != 0.0));
    }

    fn separable_labels(gs: &[Graph], seed: u64) -> Vec<Vec<bool>> {
        let mut rng = rng_from_seed(seed);
        let dim = gs[0].feature_dim();
        let normal: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        gs.iter()
            .map(|g| {
                g.features()
                    .row_iter()
                    .map(|r| r.iter().zip(&normal).map(|(a, b)| a * b).sum::<f64>() > 0.0)
                    .collect()
            })
            .collect()
    }

    #[test]
    fn finetune_zero_epochs_and_zero_lr_are_identity() {
        let gs = graphs(4, 5, 3, 6);
        let labels = separable_labels(&gs, 1);
        let m = GnnModel::init(&ModelSpec::new(Architecture::Gcn, 3, 4), 2).unwrap();
        let out = finetune(&m, &gs, &labels, &TrainConfig::new(0, 0.1, 0)).unwrap();
        assert_eq!(out.model, m);
        let out = finetune(&m, &gs, &labels, &TrainConfig::new(5, 0.0, 0)).unwrap();
        assert_eq!(out.model, m);
        let out = finetune(&m, &gs, &labels, &TrainConfig::new(5, 0.05, 0)).unwrap();
        assert_ne!(out.model, m);
        assert_ne!(out.model.embed(&gs[0]).unwrap(), m.embed(&gs[0]).unwrap());
    }

    #[test]
    fn finetune_accuracy_improves_on_separable_labels() {
        let gs = graphs(20, 8, 4, 7);
        let labels = separable_labels(&gs, 3);
        let m = GnnModel::init(&ModelSpec::new(Architecture::Sage, 4, 8), 5).unwrap();
        let mut cfg = TrainConfig::new(20, 0.05, 1);
        cfg.optimizer = Optimizer::GradientDescent;
        let out = finetune(&m, &gs, &labels, &cfg).unwrap();
        let acc = &out.accuracy;
        assert_eq!(acc.len(), 21);
        assert!(acc[20] >= acc[0], "{acc:?}");
        assert!(acc[20] > 0.6, "{acc:?}");
    }
}
