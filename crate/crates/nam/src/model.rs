//! The attentive multiview network.
//!
//! Each view `h` owns a tower: a context embedder `f`, a target embedder `g`
//! (both into `z_t` dimensions), an attention embedder `α` (into `z_a`
//! dimensions), and an affine calibration `μ = w·s + b` of its cosine score
//! `s = cos(f_i, g_j)`. Views are fused per pair with
//!
//! ```text
//! γ_h = cos(α_i, α_j)      a = softmax over views available for both items
//! ψ   = Σ_h a_h · μ_h
//! ```
//!
//! A view missing for either item is excluded from the softmax support, which
//! is the same as setting its logit to −∞.
//!
//! Training uses softmax-with-negative-sampling losses. Phase one averages a
//! per-view loss over the views available for the pair; phase two adds the
//! loss on ψ. Gradients are computed by hand in [`ExampleGraph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{NamError, Result};
use crate::math::{
    cosine_backward, cosine_forward, linear_forward, logsumexp, masked_softmax, relu_backward, relu_forward,
    softmax, softmax_backward, Matrix, Param,
};
use crate::views::{ItemIdx, ViewId, ViewKind, ViewRegistry};

/// Fully connected affine layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn xavier<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let data = (0..inputs * outputs).map(|_| rng.gen_range(-bound..=bound)).collect();
        Linear {
            weight: Param::new(Matrix::from_vec(outputs, inputs, data).expect("sized")),
            bias: Param::new(Matrix::zeros(outputs, 1)),
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Linear {
            weight: Param::new(Matrix::zeros(outputs, inputs)),
            bias: Param::new(Matrix::zeros(outputs, 1)),
        }
    }

    pub fn identity(n: usize) -> Self {
        Linear {
            weight: Param::new(Matrix::identity(n)),
            bias: Param::new(Matrix::zeros(n, 1)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.value.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        linear_forward(&self.weight.value, self.bias.value.as_slice(), x)
    }

    fn forward_trace(&self, x: &[f64]) -> Result<EmbedTrace> {
        Ok(EmbedTrace {
            hidden_pre: Vec::new(),
            hidden: Vec::new(),
            output: self.forward(x)?,
        })
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, x: &[f64], upstream: &[f64]) -> Vec<f64> {
        let cols = self.inputs();
        let mut dx = vec![0.0; cols];
        let w = self.weight.value.as_slice();
        let dw = self.weight.grad.as_mut_slice();
        let db = self.bias.grad.as_mut_slice();
        for (r, &u) in upstream.iter().enumerate() {
            if u == 0.0 {
                continue;
            }
            db[r] += u;
            let row = r * cols;
            for c in 0..cols {
                dw[row + c] += u * x[c];
                dx[c] += w[row + c] * u;
            }
        }
        dx
    }

    fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }
}

/// Embedding network of a view: linear for CF, one ReLU hidden layer of width
/// `z_t` for content views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum Embedder {
    Linear(Linear),
    Mlp { hidden: Linear, output: Linear },
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Embedder {
    pub fn for_kind<R: Rng>(kind: ViewKind, inputs: usize, z_t: usize, rng: &mut R) -> Self {
        match kind {
            ViewKind::Cf => Embedder::Linear(Linear::xavier(inputs, z_t, rng)),
            _ => Embedder::Mlp {
                hidden: Linear::xavier(inputs, z_t, rng),
                output: Linear::xavier(z_t, z_t, rng),
            },
        }
    }

    pub fn arch(&self) -> &'static str {
        match self {
            Embedder::Linear(_) => "linear",
            Embedder::Mlp { .. } => "mlp",
        }
    }

    pub fn inputs(&self) -> usize {
        match self {
            Embedder::Linear(l) => l.inputs(),
            Embedder::Mlp { hidden, .. } => hidden.inputs(),
        }
    }

    pub fn outputs(&self) -> usize {
        match self {
            Embedder::Linear(l) => l.outputs(),
            Embedder::Mlp { output, .. } => output.outputs(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_trace(x)?.output)
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<EmbedTrace> {
        match self {
            Embedder::Linear(l) => Ok(EmbedTrace {
                hidden_pre: Vec::new(),
                hidden: Vec::new(),
                output: l.forward(x)?,
            }),
            Embedder::Mlp { hidden, output } => {
                let hidden_pre = hidden.forward(x)?;
                let h = relu_forward(&hidden_pre);
                let out = output.forward(&h)?;
                Ok(EmbedTrace {
                    hidden_pre,
                    hidden: h,
                    output: out,
                })
            }
        }
    }

    fn backward(&mut self, x: &[f64], trace: &EmbedTrace, upstream: &[f64]) {
        match self {
            Embedder::Linear(l) => {
                l.backward(x, upstream);
            }
            Embedder::Mlp { hidden, output } => {
                let dh = output.backward(&trace.hidden, upstream);
                let dpre = relu_backward(&trace.hidden_pre, &dh);
                hidden.backward(x, &dpre);
            }
        }
    }

    /// Smallest |pre-activation| of the hidden layer; `∞` for linear nets.
    pub fn kink_margin(&self, x: &[f64]) -> Result<f64> {
        let t = self.forward_trace(x)?;
        Ok(t.hidden_pre.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min))
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Embedder::Linear(l) => l.params_mut().into(),
            Embedder::Mlp { hidden, output } => {
                let mut v: Vec<&mut Param> = hidden.params_mut().into();
                v.extend(output.params_mut());
                v
            }
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Embedder::Linear(l) => l.params().into(),
            Embedder::Mlp { hidden, output } => {
                let mut v: Vec<&Param> = hidden.params().into();
                v.extend(output.params());
                v
            }
        }
    }
}

/// Which part of a tower a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Context,
    Target,
    Attention,
    Scale,
    Offset,
    Temperature,
}

impl ParamRole {
    /// Roles trained in the view-dependent phase.
    pub fn is_embedding(self) -> bool {
        matches!(self, ParamRole::Context | ParamRole::Target)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewTower {
    pub view: ViewId,
    pub input_dim: usize,
    pub context: Embedder,
    pub target: Embedder,
    pub attention: Linear,
    /// `w` of the affine calibration.
    pub scale: Param,
    /// `b` of the affine calibration.
    pub offset: Param,
    /// Multiplies the view score inside the per-view loss when enabled.
    pub temperature: Param,
}

impl ViewTower {
    pub fn new<R: Rng>(view: ViewId, input_dim: usize, z_t: usize, z_a: usize, rng: &mut R) -> Self {
        let context = Embedder::for_kind(view.kind, input_dim, z_t, rng);
        let target = Embedder::for_kind(view.kind, input_dim, z_t, rng);
        let attention = Linear::xavier(input_dim, z_a, rng);
        ViewTower {
            view,
            input_dim,
            context,
            target,
            attention,
            scale: Param::scalar(1.0),
            offset: Param::scalar(0.0),
            temperature: Param::scalar(1.0),
        }
    }

    pub fn w(&self) -> f64 {
        self.scale.scalar_value()
    }

    pub fn b(&self) -> f64 {
        self.offset.scalar_value()
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(ParamRole, &mut Param)) {
        for p in self.context.params_mut() {
            f(ParamRole::Context, p);
        }
        for p in self.target.params_mut() {
            f(ParamRole::Target, p);
        }
        for p in self.attention.params_mut() {
            f(ParamRole::Attention, p);
        }
        f(ParamRole::Scale, &mut self.scale);
        f(ParamRole::Offset, &mut self.offset);
        f(ParamRole::Temperature, &mut self.temperature);
    }

    fn visit(&self, f: &mut dyn FnMut(ParamRole, &Param)) {
        for p in self.context.params() {
            f(ParamRole::Context, p);
        }
        for p in self.target.params() {
            f(ParamRole::Target, p);
        }
        for p in self.attention.params() {
            f(ParamRole::Attention, p);
        }
        f(ParamRole::Scale, &self.scale);
        f(ParamRole::Offset, &self.offset);
        f(ParamRole::Temperature, &self.temperature);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamModel {
    pub z_t: usize,
    pub z_a: usize,
    pub towers: Vec<ViewTower>,
}

impl NamModel {
    /// One tower per registry view, in registry order.
    pub fn new(registry: &ViewRegistry, z_t: usize, z_a: usize, seed: u64) -> Result<Self> {
        if z_t == 0 || z_a == 0 {
            return Err(NamError::Domain("z_t and z_a must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let towers = registry
            .views()
            .iter()
            .enumerate()
            .map(|(k, v)| ViewTower::new(v.clone(), registry.dim(k), z_t, z_a, &mut rng))
            .collect();
        Ok(NamModel { z_t, z_a, towers })
    }

    pub fn num_views(&self) -> usize {
        self.towers.len()
    }

    pub fn view_order(&self) -> Vec<ViewId> {
        self.towers.iter().map(|t| t.view.clone()).collect()
    }

    /// Checks that towers line up with the registry views, in order.
    pub fn validate(&self, registry: &ViewRegistry) -> Result<()> {
        if self.towers.len() != registry.num_views() {
            return Err(NamError::Checkpoint(format!(
                "model has {} views, registry has {}",
                self.towers.len(),
                registry.num_views()
            )));
        }
        for (k, tower) in self.towers.iter().enumerate() {
            let view = &registry.views()[k];
            if &tower.view != view {
                return Err(NamError::Checkpoint(format!(
                    "view {k} is {:?} in the model but {:?} in the registry",
                    tower.view.name, view.name
                )));
            }
            let dims_ok = tower.input_dim == registry.dim(k)
                && tower.context.inputs() == tower.input_dim
                && tower.target.inputs() == tower.input_dim
                && tower.attention.inputs() == tower.input_dim
                && tower.context.outputs() == self.z_t
                && tower.target.outputs() == self.z_t
                && tower.attention.outputs() == self.z_a;
            if !dims_ok {
                return Err(NamError::Checkpoint(format!(
                    "dimension mismatch for view {:?} (registry z_h = {})",
                    view.name,
                    registry.dim(k)
                )));
            }
        }
        Ok(())
    }

    /// Visits every parameter in a fixed order with its view index and role.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(usize, ParamRole, &mut Param)) {
        for (k, tower) in self.towers.iter_mut().enumerate() {
            tower.visit_mut(&mut |role, p| f(k, role, p));
        }
    }

    pub fn visit_params(&self, mut f: impl FnMut(usize, ParamRole, &Param)) {
        for (k, tower) in self.towers.iter().enumerate() {
            tower.visit(&mut |role, p| f(k, role, p));
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|_, _, p| p.zero_grad());
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, _, p| n += p.len());
        n
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(|_, _, p| out.extend_from_slice(p.value.as_slice()));
        out
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(|_, _, p| out.extend_from_slice(p.grad.as_slice()));
        out
    }

    /// `(view, role)` of each coordinate of [`NamModel::flat_params`].
    pub fn flat_roles(&self) -> Vec<(usize, ParamRole)> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(|k, role, p| out.extend(std::iter::repeat_n((k, role), p.len())));
        out
    }

    pub fn set_flat_params(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(|_, _, p| {
            let n = p.len();
            p.value.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        });
        assert_eq!(offset, values.len(), "flat parameter length mismatch");
    }

    fn direct<'r>(&self, registry: &'r ViewRegistry, view: usize, item: ItemIdx) -> Option<&'r [f64]> {
        registry.vector(view, item).map(|v| v.as_slice())
    }

    pub fn embed_context(&self, view: usize, direct: &[f64]) -> Result<Vec<f64>> {
        self.towers[view].context.forward(direct)
    }

    pub fn embed_target(&self, view: usize, direct: &[f64]) -> Result<Vec<f64>> {
        self.towers[view].target.forward(direct)
    }

    pub fn embed_attention(&self, view: usize, direct: &[f64]) -> Result<Vec<f64>> {
        self.towers[view].attention.forward(direct)
    }

    /// Context, target and attention vectors of an item for every view it has.
    pub fn encode_item(&self, registry: &ViewRegistry, item: ItemIdx) -> Result<ItemEncoding> {
        let views = (0..self.num_views())
            .map(|h| {
                self.direct(registry, h, item)
                    .map(|x| -> Result<ViewEncoding> {
                        Ok(ViewEncoding {
                            context: self.embed_context(h, x)?,
                            target: self.embed_target(h, x)?,
                            attention: self.embed_attention(h, x)?,
                        })
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(ItemEncoding { views })
    }

    /// Scores `(i, j)` from precomputed encodings.
    pub fn score_encoded(
        &self,
        context: &ItemEncoding,
        target: &ItemEncoding,
        enabled: &[bool],
    ) -> Result<PairScoreBreakdown> {
        let n = self.num_views();
        let mut mask = vec![false; n];
        let mut s = vec![0.0; n];
        let mut gamma = vec![0.0; n];
        let mut mu = vec![0.0; n];
        for h in 0..n {
            if let (true, Some(ci), Some(tj)) = (enabled[h], &context.views[h], &target.views[h]) {
                mask[h] = true;
                s[h] = view_score(&ci.context, &tj.target)?;
                gamma[h] = attention_logit(&ci.attention, &tj.attention)?;
                mu[h] = self.towers[h].w() * s[h] + self.towers[h].b();
            }
        }
        let a = masked_softmax(&gamma, &mask)?;
        let psi = fuse(&a, &mu, &mask);
        Ok(PairScoreBreakdown {
            s,
            gamma,
            a,
            mu,
            psi,
            mask,
        })
    }

    /// Full per-view breakdown of ψ for one pair.
    pub fn pair_forward(
        &self,
        registry: &ViewRegistry,
        i: ItemIdx,
        j: ItemIdx,
        enabled: &[bool],
    ) -> Result<PairScoreBreakdown> {
        let ei = self.encode_item(registry, i)?;
        let ej = self.encode_item(registry, j)?;
        self.score_encoded(&ei, &ej, enabled)
    }
}

fn fuse(a: &[f64], mu: &[f64], mask: &[bool]) -> f64 {
    let mut psi = 0.0;
    for h in 0..a.len() {
        if mask[h] {
            psi += a[h] * mu[h];
        }
    }
    psi
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewEncoding {
    pub context: Vec<f64>,
    pub target: Vec<f64>,
    pub attention: Vec<f64>,
}

/// Per-view encodings of one item; `None` where the item lacks the view.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemEncoding {
    pub views: Vec<Option<ViewEncoding>>,
}

/// Everything that goes into ψ for one pair. Entries of masked views are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct PairScoreBreakdown {
    pub s: Vec<f64>,
    pub gamma: Vec<f64>,
    pub a: Vec<f64>,
    pub mu: Vec<f64>,
    pub psi: f64,
    /// True where the view is available for both items (and enabled).
    pub mask: Vec<bool>,
}

/// Cosine between a context and a target embedding.
pub fn view_score(context: &[f64], target: &[f64]) -> Result<f64> {
    cosine_forward(context, target)
}

/// Cosine between two attention embeddings.
pub fn attention_logit(alpha_i: &[f64], alpha_j: &[f64]) -> Result<f64> {
    cosine_forward(alpha_i, alpha_j)
}

/// Which scores form the log-partition of the SNS loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Partition {
    /// `−s⁺ + log Σ_k exp(s⁻_k)`: the positive is not in the sum.
    #[default]
    NegativesOnly,
    /// `−s⁺ + log(exp(s⁺) + Σ_k exp(s⁻_k))`, the usual sampled softmax.
    WithPositive,
}

/// SNS loss and its gradient with respect to the positive and negative
/// scores.
pub fn sns_loss_grad(pos: f64, negs: &[f64], partition: Partition) -> Result<(f64, f64, Vec<f64>)> {
    if negs.is_empty() {
        return Err(NamError::Domain("SNS loss needs at least one negative".into()));
    }
    match partition {
        Partition::NegativesOnly => {
            let loss = -pos + logsumexp(negs)?;
            Ok((loss, -1.0, softmax(negs)))
        }
        Partition::WithPositive => {
            let mut all = Vec::with_capacity(negs.len() + 1);
            all.push(pos);
            all.extend_from_slice(negs);
            let loss = -pos + logsumexp(&all)?;
            let p = softmax(&all);
            Ok((loss, p[0] - 1.0, p[1..].to_vec()))
        }
    }
}

pub fn sns_loss(pos: f64, negs: &[f64], partition: Partition) -> Result<f64> {
    Ok(sns_loss_grad(pos, negs, partition)?.0)
}

/// Per-view loss `−s_ij + log Σ_k exp(s_{i n_k})`.
pub fn sns_loss_view(s_pos: f64, s_negs: &[f64]) -> Result<f64> {
    sns_loss(s_pos, s_negs, Partition::NegativesOnly)
}

/// Multiview loss `−ψ_ij + log Σ_k exp(ψ_{i n_k})`.
pub fn sns_loss_nam(psi_pos: f64, psi_negs: &[f64]) -> Result<f64> {
    sns_loss(psi_pos, psi_negs, Partition::NegativesOnly)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// View-dependent training of `f` and `g`.
    One,
    /// Attentive multiview training.
    Two,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the per-view loss in phase two.
    pub lambda: f64,
    /// Stop the ψ loss gradient at the view scores, so `f` and `g` are only
    /// tuned through the λ term in phase two.
    pub stop_gradient_psi: bool,
    pub partition: Partition,
    /// Use the learnable per-view temperature in the per-view loss.
    pub view_temperature: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: 0.1,
            stop_gradient_psi: true,
            partition: Partition::NegativesOnly,
            view_temperature: false,
        }
    }
}

/// A positive pair and its sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairExample {
    pub context: ItemIdx,
    pub target: ItemIdx,
    pub negatives: Vec<ItemIdx>,
}

struct ContextView {
    f: EmbedTrace,
    alpha: Option<EmbedTrace>,
}

struct SlotView {
    g: EmbedTrace,
    alpha: Option<EmbedTrace>,
    s: f64,
}

struct Slot {
    item: ItemIdx,
    views: Vec<Option<SlotView>>,
    /// Set when ψ is defined for this slot (phase two).
    fused: Option<PairScoreBreakdown>,
}

/// Forward state of one example, ready for [`ExampleGraph::backward`].
pub struct ExampleGraph {
    context: ItemIdx,
    phase: Phase,
    config: LossConfig,
    context_views: Vec<Option<ContextView>>,
    /// Slot 0 is the positive target, the rest are negatives.
    slots: Vec<Slot>,
    /// Views contributing to the per-view loss, with their loss values.
    view_losses: Vec<(usize, f64)>,
    pub loss: f64,
}

impl ExampleGraph {
    /// Runs the forward pass for `example`.
    ///
    /// A view enters the per-view average only if the context, the target and
    /// at least one negative have it. Negatives without any common view with
    /// the context drop out of the ψ loss.
    pub fn forward(
        model: &NamModel,
        registry: &ViewRegistry,
        example: &PairExample,
        phase: Phase,
        config: &LossConfig,
        enabled: &[bool],
    ) -> Result<Self> {
        let n = model.num_views();
        let need_alpha = phase == Phase::Two;
        let need_view_loss = phase == Phase::One || config.lambda > 0.0;

        let mut context_views = Vec::with_capacity(n);
        for h in 0..n {
            let cv = match (enabled[h], model.direct(registry, h, example.context)) {
                (true, Some(x)) => Some(ContextView {
                    f: model.towers[h].context.forward_trace(x)?,
                    alpha: if need_alpha {
                        Some(model.towers[h].attention.forward_trace(x)?)
                    } else {
                        None
                    },
                }),
                _ => None,
            };
            context_views.push(cv);
        }

        let items = std::iter::once(example.target).chain(example.negatives.iter().copied());
        let mut slots = Vec::with_capacity(example.negatives.len() + 1);
        for item in items {
            let mut views = Vec::with_capacity(n);
            for h in 0..n {
                let sv = match (&context_views[h], model.direct(registry, h, item)) {
                    (Some(cv), Some(x)) => {
                        let g = model.towers[h].target.forward_trace(x)?;
                        let s = view_score(&cv.f.output, &g.output)?;
                        let alpha = if need_alpha {
                            Some(model.towers[h].attention.forward_trace(x)?)
                        } else {
                            None
                        };
                        Some(SlotView { g, alpha, s })
                    }
                    _ => None,
                };
                views.push(sv);
            }
            slots.push(Slot {
                item,
                views,
                fused: None,
            });
        }

        let mut graph = ExampleGraph {
            context: example.context,
            phase,
            config: *config,
            context_views,
            slots,
            view_losses: Vec::new(),
            loss: 0.0,
        };

        let mut loss = 0.0;
        if need_view_loss {
            for h in 0..n {
                let Some(pos) = &graph.slots[0].views[h] else { continue };
                let negs: Vec<f64> = graph.slots[1..]
                    .iter()
                    .filter_map(|s| s.views[h].as_ref().map(|v| v.s))
                    .collect();
                if negs.is_empty() {
                    continue;
                }
                let tau = graph.temperature(model, h);
                let scaled: Vec<f64> = negs.iter().map(|s| tau * s).collect();
                let l = sns_loss(tau * pos.s, &scaled, config.partition)?;
                graph.view_losses.push((h, l));
            }
            if graph.view_losses.is_empty() {
                return Err(NamError::NoActiveView);
            }
            let mean = graph.view_losses.iter().map(|(_, l)| l).sum::<f64>() / graph.view_losses.len() as f64;
            loss += if phase == Phase::Two { config.lambda * mean } else { mean };
        }

        if phase == Phase::Two {
            for k in 0..graph.slots.len() {
                graph.slots[k].fused = graph.fuse_slot(model, k)?;
            }
            let pos = graph.slots[0].fused.as_ref().ok_or(NamError::NoActiveView)?.psi;
            let negs: Vec<f64> = graph.slots[1..]
                .iter()
                .filter_map(|s| s.fused.as_ref().map(|b| b.psi))
                .collect();
            if negs.is_empty() {
                return Err(NamError::NoActiveView);
            }
            loss += sns_loss(pos, &negs, config.partition)?;
        }
        graph.loss = loss;
        Ok(graph)
    }

    fn temperature(&self, model: &NamModel, h: usize) -> f64 {
        if self.config.view_temperature {
            model.towers[h].temperature.scalar_value()
        } else {
            1.0
        }
    }

    fn fuse_slot(&self, model: &NamModel, k: usize) -> Result<Option<PairScoreBreakdown>> {
        let n = model.num_views();
        let slot = &self.slots[k];
        let mut mask = vec![false; n];
        let mut s = vec![0.0; n];
        let mut gamma = vec![0.0; n];
        let mut mu = vec![0.0; n];
        for h in 0..n {
            if let (Some(cv), Some(sv)) = (&self.context_views[h], &slot.views[h]) {
                let (ai, aj) = (cv.alpha.as_ref(), sv.alpha.as_ref());
                let (Some(ai), Some(aj)) = (ai, aj) else { continue };
                mask[h] = true;
                s[h] = sv.s;
                gamma[h] = attention_logit(&ai.output, &aj.output)?;
                mu[h] = model.towers[h].w() * s[h] + model.towers[h].b();
            }
        }
        if !mask.iter().any(|&m| m) {
            return Ok(None);
        }
        let a = masked_softmax(&gamma, &mask)?;
        let psi = fuse(&a, &mu, &mask);
        Ok(Some(PairScoreBreakdown {
            s,
            gamma,
            a,
            mu,
            psi,
            mask,
        }))
    }

    /// Views that entered the per-view loss.
    pub fn available_views(&self) -> Vec<usize> {
        self.view_losses.iter().map(|(h, _)| *h).collect()
    }

    /// Backpropagates `upstream · loss` into the model's gradient accumulators.
    pub fn backward(&self, model: &mut NamModel, registry: &ViewRegistry, upstream: f64) -> Result<()> {
        let n = model.num_views();
        let z_t = model.z_t;
        let z_a = model.z_a;
        let mut d_f = vec![vec![0.0; z_t]; n];
        let mut d_alpha_ctx = vec![vec![0.0; z_a]; n];
        let mut d_g = vec![vec![vec![0.0; z_t]; n]; self.slots.len()];
        let mut d_alpha = vec![vec![vec![0.0; z_a]; n]; self.slots.len()];
        let mut touched_fg = false;

        if !self.view_losses.is_empty() {
            let weight = if self.phase == Phase::Two { self.config.lambda } else { 1.0 };
            let coeff = upstream * weight / self.view_losses.len() as f64;
            for &(h, _) in &self.view_losses {
                let tau = self.temperature(model, h);
                let Some(cv) = &self.context_views[h] else { continue };
                let live: Vec<usize> = (1..self.slots.len())
                    .filter(|&k| self.slots[k].views[h].is_some())
                    .collect();
                let s_of = |k: usize| self.slots[k].views[h].as_ref().map(|v| v.s).unwrap_or(0.0);
                let negs: Vec<f64> = live.iter().map(|&k| tau * s_of(k)).collect();
                let (_, dpos, dnegs) = sns_loss_grad(tau * s_of(0), &negs, self.config.partition)?;
                let mut d_tau = dpos * s_of(0);
                let mut scored = vec![(0usize, dpos)];
                for (&k, &d) in live.iter().zip(&dnegs) {
                    d_tau += d * s_of(k);
                    scored.push((k, d));
                }
                for (k, d) in scored {
                    let sv = self.slots[k].views[h].as_ref().expect("live slot");
                    let (du, dv) = cosine_backward(&cv.f.output, &sv.g.output, coeff * tau * d)?;
                    add_into(&mut d_f[h], &du);
                    add_into(&mut d_g[k][h], &dv);
                }
                if self.config.view_temperature {
                    model.towers[h].temperature.grad.as_mut_slice()[0] += coeff * d_tau;
                }
                touched_fg = true;
            }
        }

        if self.phase == Phase::Two {
            let live: Vec<usize> = (1..self.slots.len())
                .filter(|&k| self.slots[k].fused.is_some())
                .collect();
            let pos = self.slots[0].fused.as_ref().ok_or(NamError::NoActiveView)?;
            let negs: Vec<f64> = live
                .iter()
                .map(|&k| self.slots[k].fused.as_ref().map_or(0.0, |b| b.psi))
                .collect();
            let (_, dpos, dnegs) = sns_loss_grad(pos.psi, &negs, self.config.partition)?;
            let mut scored = vec![(0usize, dpos)];
            scored.extend(live.iter().copied().zip(dnegs));
            for (k, dpsi) in scored {
                let b = self.slots[k].fused.as_ref().expect("live slot");
                let d_psi = upstream * dpsi;
                // ψ = Σ a_h μ_h: ∂ψ/∂μ_h = a_h, and the softmax VJP gives ∂ψ/∂γ.
                let d_gamma = softmax_backward(&b.a, &b.mu);
                for h in 0..n {
                    if !b.mask[h] {
                        continue;
                    }
                    let d_mu = d_psi * b.a[h];
                    let w = model.towers[h].w();
                    model.towers[h].scale.grad.as_mut_slice()[0] += d_mu * b.s[h];
                    model.towers[h].offset.grad.as_mut_slice()[0] += d_mu;
                    let cv = self.context_views[h].as_ref().expect("masked in");
                    let sv = self.slots[k].views[h].as_ref().expect("masked in");
                    if !self.config.stop_gradient_psi {
                        let (du, dv) = cosine_backward(&cv.f.output, &sv.g.output, d_mu * w)?;
                        add_into(&mut d_f[h], &du);
                        add_into(&mut d_g[k][h], &dv);
                        touched_fg = true;
                    }
                    let (ai, aj) = (cv.alpha.as_ref().expect("phase two"), sv.alpha.as_ref().expect("phase two"));
                    let (du, dv) = cosine_backward(&ai.output, &aj.output, d_psi * d_gamma[h])?;
                    add_into(&mut d_alpha_ctx[h], &du);
                    add_into(&mut d_alpha[k][h], &dv);
                }
            }
        }

        for h in 0..n {
            let Some(cv) = &self.context_views[h] else { continue };
            let x = model.direct(registry, h, self.context).expect("context has view").to_vec();
            let tower = &mut model.towers[h];
            if touched_fg {
                tower.context.backward(&x, &cv.f, &d_f[h]);
            }
            if self.phase == Phase::Two {
                tower.attention.backward(&x, &d_alpha_ctx[h]);
            }
            for (k, slot) in self.slots.iter().enumerate() {
                let Some(sv) = &slot.views[h] else { continue };
                let y = registry.vector(h, slot.item).expect("slot has view").as_slice();
                let tower = &mut model.towers[h];
                if touched_fg {
                    tower.target.backward(y, &sv.g, &d_g[k][h]);
                }
                if self.phase == Phase::Two {
                    tower.attention.backward(y, &d_alpha[k][h]);
                }
            }
        }
        Ok(())
    }
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// Loss of one example.
pub fn pair_loss(
    model: &NamModel,
    registry: &ViewRegistry,
    example: &PairExample,
    phase: Phase,
    config: &LossConfig,
    enabled: &[bool],
) -> Result<f64> {
    Ok(ExampleGraph::forward(model, registry, example, phase, config, enabled)?.loss)
}

/// Per-view loss averaged over the views available for the pair.
pub fn phase1_pair_loss(
    model: &NamModel,
    registry: &ViewRegistry,
    example: &PairExample,
    config: &LossConfig,
    enabled: &[bool],
) -> Result<f64> {
    pair_loss(model, registry, example, Phase::One, config, enabled)
}

/// Loss on ψ plus λ times the phase-one loss.
pub fn phase2_pair_loss(
    model: &NamModel,
    registry: &ViewRegistry,
    example: &PairExample,
    config: &LossConfig,
    enabled: &[bool],
) -> Result<f64> {
    pair_loss(model, registry, example, Phase::Two, config, enabled)
}

/// Forward plus backward; gradients accumulate (scaled by `upstream`) into
/// the model. Returns the loss.
pub fn pair_backward(
    model: &mut NamModel,
    registry: &ViewRegistry,
    example: &PairExample,
    phase: Phase,
    config: &LossConfig,
    enabled: &[bool],
    upstream: f64,
) -> Result<f64> {
    let graph = ExampleGraph::forward(model, registry, example, phase, config, enabled)?;
    graph.backward(model, registry, upstream)?;
    Ok(graph.loss)
}

/// Scoring modes over the registered views.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewMode {
    /// All views.
    #[default]
    Nam,
    /// Content views only: the CF view is masked for every pair.
    NamCb,
    /// CF view only.
    CfOnly,
}

impl ViewMode {
    pub fn enabled(self, views: &[ViewId]) -> Vec<bool> {
        views
            .iter()
            .map(|v| match self {
                ViewMode::Nam => true,
                ViewMode::NamCb => v.kind != ViewKind::Cf,
                ViewMode::CfOnly => v.kind == ViewKind::Cf,
            })
            .collect()
    }
}

impl std::str::FromStr for ViewMode {
    type Err = NamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nam" => Ok(ViewMode::Nam),
            "nam-cb" => Ok(ViewMode::NamCb),
            "cf-only" => Ok(ViewMode::CfOnly),
            other => Err(NamError::Domain(format!("unknown mode {other:?} (nam, nam-cb, cf-only)"))),
        }
    }
}

/// Enables exactly one view by name.
pub fn single_view(views: &[ViewId], name: &str) -> Vec<bool> {
    views.iter().map(|v| v.name == name).collect()
}
