//! Residual networks with diffusion layers: forward, exact reverse-mode
//! gradients, losses, and the SGD training loop.
//!
//! A network is `s` residual blocks, each followed by `r` diffusion rounds
//! over a fixed sample graph, topped by an affine classifier. The residual
//! block computes `x + FC2(ReLU(FC1 x))` (the graph variant drops FC2 and
//! adds the ReLU branch directly); the diffusion rounds mix samples with
//! [`crate::diffusion::diffusion_step`], optionally followed by inverted
//! dropout in training mode. Because the diffusion map `I − γ(Λ − W)` is
//! symmetric, its backward pass is the map itself, which keeps
//! [`backward`] exact rather than approximate.
//!
//! With `r = 0` the whole system collapses to a vanilla residual network —
//! that identity is load-bearing (it is how the diffusion ablations are
//! run) and is pinned by tests against an independently coded forward.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{self, DiffusionConfig};
use crate::error::{Error, Result};
use crate::graph::SparseWeights;

/// Affine map `y = x Wᵀ + b` over row-major samples; `weight` is
/// `out_dim × in_dim`.
#[derive(Debug, Clone)]
pub struct Affine {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Affine {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::DimensionMismatch(format!(
                "affine weight has {} output rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        Ok(Affine { weight, bias })
    }

    /// Uniform init in `[−1/√in_dim, 1/√in_dim]` for weight and bias — the
    /// usual fan-in scaling.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weight =
            Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-bound..bound));
        let bias = Array1::from_shape_fn(out_dim, |_| rng.random_range(-bound..bound));
        Affine { weight, bias }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Affine {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn apply(&self, x: &ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.in_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input has {} columns, affine expects {}",
                x.ncols(),
                self.in_dim()
            )));
        }
        Ok(x.dot(&self.weight.t()) + &self.bias)
    }
}

/// One residual block: `x + FC2(ReLU(FC1 x))`, both maps `d → d`. The
/// graph variant ignores `fc2` (see [`DiffResNetParams::use_fc2`]); the
/// field stays allocated so parameter and optimizer shapes are
/// architecture-independent.
#[derive(Debug, Clone)]
pub struct ResidualBlockParams {
    pub fc1: Affine,
    pub fc2: Affine,
}

/// Full parameter set: `s` residual blocks, the affine classifier, and the
/// architecture flags.
#[derive(Debug, Clone)]
pub struct DiffResNetParams {
    pub blocks: Vec<ResidualBlockParams>,
    pub classifier: Affine,
    /// `false` drops FC2 from every block; the residual branch is then the
    /// ReLU output itself.
    pub use_fc2: bool,
    /// Inverted-dropout rate applied after each diffusion round in training
    /// mode; `0` disables dropout entirely.
    pub dropout_rate: f64,
}

impl DiffResNetParams {
    /// Fresh parameters for a `dim → … → classes` network with `s` blocks,
    /// seeded so identical seeds give identical parameters. Sampling order
    /// is fc1 then fc2 per block (fc2 is drawn even when `use_fc2` is
    /// false, keeping the stream layout architecture-independent), then
    /// the classifier.
    pub fn init(
        dim: usize,
        classes: usize,
        s: usize,
        use_fc2: bool,
        dropout_rate: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 || classes == 0 {
            return Err(Error::InvalidParameter(
                "network needs a positive feature dimension and class count".into(),
            ));
        }
        if s == 0 {
            return Err(Error::InvalidParameter(
                "network needs at least one residual block".into(),
            ));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks = (0..s)
            .map(|_| ResidualBlockParams {
                fc1: Affine::init(dim, dim, &mut rng),
                fc2: Affine::init(dim, dim, &mut rng),
            })
            .collect();
        let classifier = Affine::init(classes, dim, &mut rng);
        Ok(DiffResNetParams {
            blocks,
            classifier,
            use_fc2,
            dropout_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.classifier.in_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.out_dim()
    }

    /// Total scalar parameter count (fc2 included only when active).
    pub fn n_parameters(&self) -> usize {
        let affine = |a: &Affine| a.weight.len() + a.bias.len();
        let per_block = |b: &ResidualBlockParams| {
            affine(&b.fc1) + if self.use_fc2 { affine(&b.fc2) } else { 0 }
        };
        self.blocks.iter().map(per_block).sum::<usize>() + affine(&self.classifier)
    }

    /// Flat JSON export: architecture flags plus row-major matrices.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&ParamsFlat::from(self))?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let flat: ParamsFlat = serde_json::from_str(text)?;
        flat.build()
    }
}

#[derive(Serialize, Deserialize)]
struct AffineFlat {
    out_dim: usize,
    in_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl AffineFlat {
    fn from(a: &Affine) -> Self {
        AffineFlat {
            out_dim: a.out_dim(),
            in_dim: a.in_dim(),
            weight: a.weight.iter().copied().collect(),
            bias: a.bias.to_vec(),
        }
    }

    fn build(self) -> Result<Affine> {
        let weight = Array2::from_shape_vec((self.out_dim, self.in_dim), self.weight)
            .map_err(|e| Error::InvalidParameter(format!("bad weight shape: {e}")))?;
        if self.bias.len() != self.out_dim {
            return Err(Error::InvalidParameter(format!(
                "bias has {} entries for {} outputs",
                self.bias.len(),
                self.out_dim
            )));
        }
        Affine::new(weight, Array1::from_vec(self.bias))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsFlat {
    use_fc2: bool,
    dropout_rate: f64,
    blocks: Vec<(AffineFlat, AffineFlat)>,
    classifier: AffineFlat,
}

impl ParamsFlat {
    fn from(p: &DiffResNetParams) -> Self {
        ParamsFlat {
            use_fc2: p.use_fc2,
            dropout_rate: p.dropout_rate,
            blocks: p
                .blocks
                .iter()
                .map(|b| (AffineFlat::from(&b.fc1), AffineFlat::from(&b.fc2)))
                .collect(),
            classifier: self::AffineFlat::from(&p.classifier),
        }
    }

    fn build(self) -> Result<DiffResNetParams> {
        if self.blocks.is_empty() {
            return Err(Error::InvalidParameter(
                "serialized network has no residual blocks".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidParameter(format!(
                "dropout rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let blocks = self
            .blocks
            .into_iter()
            .map(|(fc1, fc2)| {
                Ok(ResidualBlockParams {
                    fc1: fc1.build()?,
                    fc2: fc2.build()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DiffResNetParams {
            blocks,
            classifier: self.classifier.build()?,
            use_fc2: self.use_fc2,
            dropout_rate: self.dropout_rate,
        })
    }
}

/// The residual update of one block, applied row-wise (samples stay
/// independent — mixing is the diffusion rounds' job).
pub fn convection_forward(
    x: &ArrayView2<f64>,
    block: &ResidualBlockParams,
    use_fc2: bool,
) -> Result<Array2<f64>> {
    let z1 = block.fc1.apply(x)?;
    let a1 = z1.mapv(|v| v.max(0.0));
    let branch = if use_fc2 {
        block.fc2.apply(&a1.view())?
    } else {
        a1
    };
    Ok(x + &branch)
}

/// Per-block intermediates kept for the backward pass.
#[derive(Debug, Clone)]
struct BlockCache {
    x_in: Array2<f64>,
    z1: Array2<f64>,
    a1: Array2<f64>,
    /// One mask per diffusion round when dropout was active (entries 0 or
    /// `1/(1−p)`); empty in eval mode or with dropout disabled.
    masks: Vec<Array2<f64>>,
}

/// Everything [`backward`] needs from the matching [`forward`] call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    blocks: Vec<BlockCache>,
    features: Array2<f64>,
}

impl ForwardCache {
    /// The classifier's input: features after the last block's diffusion.
    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }
}

/// Full forward pass: for each block, the residual update then
/// `diff.steps` diffusion rounds (each followed by inverted dropout when
/// `train_mode` and the dropout rate is positive), then the classifier.
///
/// `w` may be `None` only when `diff.steps == 0` (the plain-ResNet
/// ablation). The stability guard in `diff` is enforced once up front. The
/// RNG is consumed only for dropout masks, so eval-mode calls leave it
/// untouched.
pub fn forward(
    x: &ArrayView2<f64>,
    params: &DiffResNetParams,
    w: Option<&SparseWeights>,
    diff: &DiffusionConfig,
    rng: &mut impl Rng,
    train_mode: bool,
) -> Result<(Array2<f64>, ForwardCache)> {
    if x.ncols() != params.dim() {
        return Err(Error::DimensionMismatch(format!(
            "input has {} columns, network expects {}",
            x.ncols(),
            params.dim()
        )));
    }
    let graph = if diff.steps > 0 {
        let w = w.ok_or_else(|| {
            Error::InvalidParameter("diffusion steps require a weight matrix".into())
        })?;
        if w.n() != x.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "weights are over {} vertices but the batch has {} rows",
                w.n(),
                x.nrows()
            )));
        }
        diffusion::ensure_stable(w, diff)?;
        Some(w)
    } else {
        None
    };

    let dropout = if train_mode { params.dropout_rate } else { 0.0 };
    let mut h = x.to_owned();
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for block in &params.blocks {
        let x_in = h;
        let z1 = block.fc1.apply(&x_in.view())?;
        let a1 = z1.mapv(|v| v.max(0.0));
        let branch = if params.use_fc2 {
            block.fc2.apply(&a1.view())?
        } else {
            a1.clone()
        };
        h = &x_in + &branch;

        let mut masks = Vec::new();
        for _ in 0..diff.steps {
            let g = graph.expect("graph checked when steps > 0");
            h = diffusion::diffusion_step(&h.view(), g, diff.gamma)?;
            if dropout > 0.0 {
                let scale = 1.0 / (1.0 - dropout);
                let mask = Array2::from_shape_fn(h.dim(), |_| {
                    if rng.random_range(0.0..1.0) < dropout {
                        0.0
                    } else {
                        scale
                    }
                });
                h *= &mask;
                masks.push(mask);
            }
        }
        blocks.push(BlockCache { x_in, z1, a1, masks });
    }
    let logits = params.classifier.apply(&h.view())?;
    Ok((logits, ForwardCache { blocks, features: h }))
}

/// Row-wise stable softmax.
pub fn softmax(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    out
}

/// Pulls a gradient on softmax outputs back to the logits:
/// `g_z = p ⊙ (g − ⟨g, p⟩)` per row.
pub fn softmax_vjp(probs: &ArrayView2<f64>, grad_probs: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(probs.dim());
    for ((mut o, p), g) in out
        .rows_mut()
        .into_iter()
        .zip(probs.rows())
        .zip(grad_probs.rows())
    {
        let inner = g.dot(&p);
        Zip::from(&mut o).and(&p).and(&g).for_each(|o, &p, &g| {
            *o = p * (g - inner);
        });
    }
    out
}

/// Mean softmax cross-entropy over the masked rows, with the exact
/// gradient on the logits (zero on unmasked rows). Masked rows must carry
/// labels below the class count.
pub fn cross_entropy_loss(
    logits: &ArrayView2<f64>,
    labels: &[Option<usize>],
    mask: &[usize],
) -> Result<(f64, Array2<f64>)> {
    let (n, k) = (logits.nrows(), logits.ncols());
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} logit rows but {} labels",
            labels.len()
        )));
    }
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut grad = Array2::zeros((n, k));
    let mut total = 0.0;
    for &row in mask {
        if row >= n {
            return Err(Error::InvalidParameter(format!(
                "mask row {row} outside 0..{n}"
            )));
        }
        let label = labels[row].ok_or_else(|| {
            Error::InvalidParameter(format!("masked row {row} has no label"))
        })?;
        if label >= k {
            return Err(Error::BadLabel {
                row,
                label,
                classes: k,
            });
        }
        let r = logits.row(row);
        let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - r[label];
        for (c, g) in grad.row_mut(row).iter_mut().enumerate() {
            *g = (r[c] - lse).exp();
        }
        grad[[row, label]] -= 1.0;
    }
    let inv = 1.0 / mask.len() as f64;
    grad.mapv_inplace(|v| v * inv);
    Ok((total * inv, grad))
}

/// Smoothness penalty `(μ/2) Σ_ij w_ij ‖f_i − f_j‖²` with its exact
/// gradient `2μ (Λ − W) f`. Used by the external convection–diffusion
/// ablation, where `f` is the row-wise softmax of the network output.
pub fn laplacian_regularizer(
    outputs: &ArrayView2<f64>,
    w: &SparseWeights,
    mu: f64,
) -> Result<(f64, Array2<f64>)> {
    if w.n() != outputs.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "weights are over {} vertices but outputs have {} rows",
            w.n(),
            outputs.nrows()
        )));
    }
    if mu == 0.0 {
        return Ok((0.0, Array2::zeros(outputs.dim())));
    }
    let mut value = 0.0;
    for i in 0..w.n() {
        for &(j, weight) in w.row(i) {
            let diff = &outputs.row(i) - &outputs.row(j);
            value += weight * diff.dot(&diff);
        }
    }
    value *= mu / 2.0;

    // 2μ(Λ f − W f), with Λ the diagonal of row sums.
    let wf = w.matmul(outputs)?;
    let deg = w.degrees();
    let mut grad = outputs.to_owned();
    for (i, mut row) in grad.rows_mut().into_iter().enumerate() {
        let d = deg[i];
        Zip::from(&mut row).and(&wf.row(i)).for_each(|g, &m| {
            *g = 2.0 * mu * (d * *g - m);
        });
    }
    Ok((value, grad))
}

/// Soft prototype attraction `α Σ_i Σ_c p_ic ‖x_i − m_c‖²`: each point is
/// pulled toward the prototypes in proportion to its predicted class
/// probabilities. Features and prototypes are fixed inputs here, so the
/// only gradient is the one on the probabilities (the squared distances
/// themselves); chain it through [`softmax_vjp`].
pub fn prototypical_loss(
    probs: &ArrayView2<f64>,
    features: &ArrayView2<f64>,
    prototypes: &ArrayView2<f64>,
    alpha: f64,
) -> Result<(f64, Array2<f64>)> {
    if probs.nrows() != features.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} probability rows but {} feature rows",
            probs.nrows(),
            features.nrows()
        )));
    }
    if probs.ncols() != prototypes.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} classes in probabilities but {} prototypes",
            probs.ncols(),
            prototypes.nrows()
        )));
    }
    if features.ncols() != prototypes.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "features have {} columns, prototypes {}",
            features.ncols(),
            prototypes.ncols()
        )));
    }
    if alpha == 0.0 {
        return Ok((0.0, Array2::zeros(probs.dim())));
    }
    let mut grad = Array2::zeros(probs.dim());
    let mut value = 0.0;
    for i in 0..probs.nrows() {
        for c in 0..prototypes.nrows() {
            let diff = &features.row(i) - &prototypes.row(c);
            let d2 = diff.dot(&diff);
            grad[[i, c]] = alpha * d2;
            value += probs[[i, c]] * alpha * d2;
        }
    }
    Ok((value, grad))
}

/// Gradient of one affine map: `(dW, db, dx)` from upstream `gy`.
fn affine_backward(
    x: &ArrayView2<f64>,
    gy: &ArrayView2<f64>,
    map: &Affine,
) -> (AffineGrads, Array2<f64>) {
    let weight = gy.t().dot(x);
    let bias = gy.sum_axis(Axis(0));
    let gx = gy.dot(&map.weight);
    (AffineGrads { weight, bias }, gx)
}

#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl AffineGrads {
    fn zeros_like(a: &Affine) -> Self {
        AffineGrads {
            weight: Array2::zeros(a.weight.dim()),
            bias: Array1::zeros(a.bias.len()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub fc1: AffineGrads,
    pub fc2: AffineGrads,
}

#[derive(Debug, Clone)]
pub struct DiffResNetGrads {
    pub blocks: Vec<BlockGrads>,
    pub classifier: AffineGrads,
}

impl DiffResNetGrads {
    pub fn zeros_like(params: &DiffResNetParams) -> Self {
        DiffResNetGrads {
            blocks: params
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    fc1: AffineGrads::zeros_like(&b.fc1),
                    fc2: AffineGrads::zeros_like(&b.fc2),
                })
                .collect(),
            classifier: AffineGrads::zeros_like(&params.classifier),
        }
    }
}

/// Exact reverse-mode gradients through classifier, diffusion rounds
/// (self-adjoint, so each round applies the forward kernel to the
/// gradient), dropout masks, and residual blocks. The ReLU subgradient at
/// exactly zero is zero. `cache` must come from a [`forward`] call with
/// the same parameters, weights, and diffusion config.
pub fn backward(
    params: &DiffResNetParams,
    cache: &ForwardCache,
    grad_logits: &ArrayView2<f64>,
    w: Option<&SparseWeights>,
    diff: &DiffusionConfig,
) -> Result<DiffResNetGrads> {
    if cache.blocks.len() != params.blocks.len() {
        return Err(Error::DimensionMismatch(format!(
            "cache has {} blocks, parameters {}; stale cache?",
            cache.blocks.len(),
            params.blocks.len()
        )));
    }
    if grad_logits.nrows() != cache.features.nrows()
        || grad_logits.ncols() != params.classifier.out_dim()
    {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            grad_logits.nrows(),
            grad_logits.ncols(),
            cache.features.nrows(),
            params.classifier.out_dim()
        )));
    }
    let graph = if diff.steps > 0 {
        Some(w.ok_or_else(|| {
            Error::InvalidParameter("diffusion steps require a weight matrix".into())
        })?)
    } else {
        None
    };

    let (classifier, mut g) =
        affine_backward(&cache.features.view(), grad_logits, &params.classifier);

    let mut rev_blocks = Vec::with_capacity(params.blocks.len());
    for (block, bc) in params.blocks.iter().zip(&cache.blocks).rev() {
        if !bc.masks.is_empty() && bc.masks.len() != diff.steps {
            return Err(Error::DimensionMismatch(format!(
                "cache has {} dropout masks for {} diffusion rounds; stale cache?",
                bc.masks.len(),
                diff.steps
            )));
        }
        for round in (0..diff.steps).rev() {
            if let Some(mask) = bc.masks.get(round) {
                g *= mask;
            }
            g = diffusion::diffusion_backward(
                &g.view(),
                graph.expect("graph checked when steps > 0"),
                diff.gamma,
            )?;
        }
        let (fc2, g_a1) = if params.use_fc2 {
            affine_backward(&bc.a1.view(), &g.view(), &block.fc2)
        } else {
            (AffineGrads::zeros_like(&block.fc2), g.clone())
        };
        let relu_gate = bc.z1.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
        let g_z1 = g_a1 * relu_gate;
        let (fc1, g_branch) = affine_backward(&bc.x_in.view(), &g_z1.view(), &block.fc1);
        g += &g_branch;
        rev_blocks.push(BlockGrads { fc1, fc2 });
    }
    rev_blocks.reverse();
    Ok(DiffResNetGrads {
        blocks: rev_blocks,
        classifier,
    })
}

/// SGD with classic coupled weight decay: `v ← m·v + (g + wd·p)`,
/// `p ← p − lr·v`.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: DiffResNetGrads,
}

impl OptimizerState {
    pub fn new(params: &DiffResNetParams, lr: f64, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            lr,
            momentum,
            weight_decay,
            velocity: DiffResNetGrads::zeros_like(params),
        }
    }
}

fn sgd_tensor2(
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    v: &mut Array2<f64>,
    lr: f64,
    m: f64,
    wd: f64,
) {
    Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
        *v = m * *v + (g + wd * *p);
        *p -= lr * *v;
    });
}

fn sgd_tensor1(
    p: &mut Array1<f64>,
    g: &Array1<f64>,
    v: &mut Array1<f64>,
    lr: f64,
    m: f64,
    wd: f64,
) {
    Zip::from(p).and(g).and(v).for_each(|p, &g, v| {
        *v = m * *v + (g + wd * *p);
        *p -= lr * *v;
    });
}

/// One optimizer step over every parameter tensor (fc2 included even when
/// inactive — its gradients are zero then, so only weight decay touches
/// it).
pub fn sgd_step(params: &mut DiffResNetParams, grads: &DiffResNetGrads, state: &mut OptimizerState) {
    let (lr, m, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((block, grad), vel) in params
        .blocks
        .iter_mut()
        .zip(&grads.blocks)
        .zip(&mut state.velocity.blocks)
    {
        sgd_tensor2(
            &mut block.fc1.weight,
            &grad.fc1.weight,
            &mut vel.fc1.weight,
            lr,
            m,
            wd,
        );
        sgd_tensor1(&mut block.fc1.bias, &grad.fc1.bias, &mut vel.fc1.bias, lr, m, wd);
        sgd_tensor2(
            &mut block.fc2.weight,
            &grad.fc2.weight,
            &mut vel.fc2.weight,
            lr,
            m,
            wd,
        );
        sgd_tensor1(&mut block.fc2.bias, &grad.fc2.bias, &mut vel.fc2.bias, lr, m, wd);
    }
    sgd_tensor2(
        &mut params.classifier.weight,
        &grads.classifier.weight,
        &mut state.velocity.classifier.weight,
        lr,
        m,
        wd,
    );
    sgd_tensor1(
        &mut params.classifier.bias,
        &grads.classifier.bias,
        &mut state.velocity.classifier.bias,
        lr,
        m,
        wd,
    );
}

/// Training hyperparameters. Defaults follow the synthetic-benchmark
/// settings (full-batch SGD, lr 1.0, momentum 0.9, weight decay 5e-4, 30
/// epochs, no schedule).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Multiply the learning rate by 0.1 at epochs `⌊T/2⌋` and `⌊3T/4⌋`.
    pub multistep: bool,
    /// Seed for the dropout mask stream.
    pub dropout_seed: u64,
    /// Weight of the Laplacian regularizer on the softmax outputs
    /// (0 disables; requires weights).
    pub mu: f64,
    /// Weight of the prototype-attraction term (0 disables; requires
    /// prototypes and a nonempty `proto_idx`).
    pub alpha: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            multistep: false,
            dropout_seed: 0,
            mu: 0.0,
            alpha: 0.0,
        }
    }
}

/// The full training problem handed to [`train`]: inputs, labels, the
/// index sets metrics are reported on, and the optional graph/prototype
/// context for the regularized variants. `labels` may be `None` on rows
/// that no index set touches.
#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub x: ArrayView2<'a, f64>,
    pub labels: &'a [Option<usize>],
    /// Rows the cross-entropy loss trains on.
    pub train_idx: &'a [usize],
    pub val_idx: &'a [usize],
    pub test_idx: &'a [usize],
    pub weights: Option<&'a SparseWeights>,
    /// Class prototypes for the attraction term, `classes × dim`.
    pub prototypes: Option<ArrayView2<'a, f64>>,
    /// Rows the attraction term covers (typically the unlabeled ones).
    pub proto_idx: &'a [usize],
}

/// One row of a training trace.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Training loss of this epoch (before the update it triggered).
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Per-epoch loss and accuracy records.
#[derive(Debug, Clone, Default)]
pub struct MetricsTrace {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch whose loss came out non-finite, ending the run early; the
    /// trace then holds only the epochs completed before it.
    pub diverged_at: Option<usize>,
}

impl MetricsTrace {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|m| m.test_acc)
    }

    /// CSV export with columns `epoch,loss,train_acc,val_acc,test_acc`.
    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let display = path.display().to_string();
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::csv(&display, e))?;
        writer
            .write_record(["epoch", "loss", "train_acc", "val_acc", "test_acc"])
            .map_err(|e| Error::csv(&display, e))?;
        for m in &self.epochs {
            writer
                .write_record([
                    m.epoch.to_string(),
                    m.loss.to_string(),
                    m.train_acc.to_string(),
                    m.val_acc.to_string(),
                    m.test_acc.to_string(),
                ])
                .map_err(|e| Error::csv(&display, e))?;
        }
        writer.flush().map_err(|e| Error::io(&display, e))?;
        Ok(())
    }
}

fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    if !cfg.multistep {
        return cfg.lr;
    }
    let mut lr = cfg.lr;
    if epoch >= cfg.epochs / 2 {
        lr *= 0.1;
    }
    if epoch >= (3 * cfg.epochs) / 4 {
        lr *= 0.1;
    }
    lr
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of labeled rows in `idx` whose argmax matches; NaN when no row
/// in `idx` is labeled.
fn accuracy(logits: &ArrayView2<f64>, labels: &[Option<usize>], idx: &[usize]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for &row in idx {
        if let Some(label) = labels.get(row).copied().flatten() {
            total += 1;
            if argmax(logits.row(row)) == label {
                hits += 1;
            }
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        hits as f64 / total as f64
    }
}

/// Full-batch training loop, deterministic given (parameters, config,
/// data): per epoch, one forward in train mode, the combined loss
/// (cross-entropy plus the enabled regularizers), one exact backward, one
/// SGD step, then an eval-mode pass for the metric row. A non-finite loss
/// stops the run early — the update is not applied, the completed epochs
/// stay in the trace, and [`MetricsTrace::diverged_at`] records where.
pub fn train(
    data: &TrainData,
    mut params: DiffResNetParams,
    diff: &DiffusionConfig,
    cfg: &TrainConfig,
) -> Result<(DiffResNetParams, MetricsTrace)> {
    if cfg.epochs == 0 {
        return Err(Error::InvalidParameter("training needs epochs >= 1".into()));
    }
    if cfg.mu > 0.0 && data.weights.is_none() {
        return Err(Error::InvalidParameter(
            "the Laplacian regularizer needs a weight matrix".into(),
        ));
    }
    if cfg.alpha > 0.0 && !data.proto_idx.is_empty() && data.prototypes.is_none() {
        return Err(Error::InvalidParameter(
            "the prototype term needs prototypes".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dropout_seed);
    let mut state = OptimizerState::new(&params, cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut trace = MetricsTrace::default();

    for epoch in 0..cfg.epochs {
        state.lr = lr_at(cfg, epoch);
        let (logits, cache) = forward(&data.x, &params, data.weights, diff, &mut rng, true)?;
        let (ce, mut grad_logits) = cross_entropy_loss(&logits.view(), data.labels, data.train_idx)?;
        let mut loss = ce;

        let proto_active = cfg.alpha > 0.0 && !data.proto_idx.is_empty();
        if cfg.mu > 0.0 || proto_active {
            let probs = softmax(&logits.view());
            let mut grad_probs = Array2::zeros(probs.dim());
            if cfg.mu > 0.0 {
                let w = data.weights.expect("checked above");
                let (value, grad) = laplacian_regularizer(&probs.view(), w, cfg.mu)?;
                loss += value;
                grad_probs += &grad;
            }
            if proto_active {
                let prototypes = data.prototypes.expect("checked above");
                let sub_probs = probs.select(Axis(0), data.proto_idx);
                let sub_x = data.x.select(Axis(0), data.proto_idx);
                let (value, grad_sub) = prototypical_loss(
                    &sub_probs.view(),
                    &sub_x.view(),
                    &prototypes,
                    cfg.alpha,
                )?;
                loss += value;
                for (pos, &row) in data.proto_idx.iter().enumerate() {
                    let mut target = grad_probs.row_mut(row);
                    target += &grad_sub.row(pos);
                }
            }
            grad_logits += &softmax_vjp(&probs.view(), &grad_probs.view());
        }

        if !loss.is_finite() {
            trace.diverged_at = Some(epoch);
            break;
        }
        let grads = backward(&params, &cache, &grad_logits.view(), data.weights, diff)?;
        sgd_step(&mut params, &grads, &mut state);

        let (eval_logits, _) = forward(&data.x, &params, data.weights, diff, &mut rng, false)?;
        trace.epochs.push(EpochMetrics {
            epoch,
            loss,
            train_acc: accuracy(&eval_logits.view(), data.labels, data.train_idx),
            val_acc: accuracy(&eval_logits.view(), data.labels, data.val_idx),
            test_acc: accuracy(&eval_logits.view(), data.labels, data.test_idx),
        });
    }
    Ok((params, trace))
}
