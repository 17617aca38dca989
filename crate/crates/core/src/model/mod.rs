//! PoseNet-shaped 3D CNN regressing three planes from a volume.
//!
//! Trunk: `conv3 -> ReLU -> batch norm -> max pool` blocks. Head: three fully
//! connected layers with ReLU between them and a linear output. Variants:
//!
//! * `baseline`: one head, no region information.
//! * `with_class`: one head; a one-hot region vector is appended to the
//!   flattened trunk features before the first FC layer.
//! * `multi_head`: shared trunk, one FC stack per region. Each sample only
//!   runs through (and only trains) its own region's head.
//!
//! Output layout per sample: for axial, coronal, sagittal in turn,
//! `[tx, ty, tz, rotation encoding...]` with the translation normalized by the
//! volume half extent.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{denormalize_translation, normalize_translation, BodyRegion, Plane, PlaneTriplet, VolumeMeta};
use crate::rng::rng_for;
use crate::rotation::{decode, encode, RepresentationKind, RotationEncoding};
use layers::*;

pub use layers::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    WithClass,
    MultiHead,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::WithClass, Variant::MultiHead];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::WithClass => "with_class",
            Variant::MultiHead => "multi_head",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownName { what: "variant", value: s.to_string() })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub repr: RepresentationKind,
    pub input_dims: [usize; 3],
    pub conv_channels: Vec<usize>,
    /// Hidden FC widths; the output layer is appended.
    pub fc_widths: Vec<usize>,
    pub n_regions: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::MultiHead,
            repr: RepresentationKind::SixDxy,
            input_dims: [32; 3],
            conv_channels: vec![8, 16, 32, 64, 64],
            fc_widths: vec![256, 50],
            n_regions: BodyRegion::COUNT,
        }
    }
}

impl ModelConfig {
    /// Full-size layer ladder (72^3 input) for shape inspection only.
    pub fn full_scale() -> Self {
        Self {
            input_dims: [72; 3],
            conv_channels: vec![8, 16, 32, 64, 228],
            fc_widths: vec![1300, 50],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dims.contains(&0)
            || self.conv_channels.is_empty()
            || self.conv_channels.contains(&0)
            || self.fc_widths.contains(&0)
            || self.n_regions == 0
        {
            return Err(Error::Config(format!("invalid model configuration: {self:?}")));
        }
        Ok(())
    }

    pub fn out_per_plane(&self) -> usize {
        3 + self.repr.size()
    }

    pub fn out_size(&self) -> usize {
        3 * self.out_per_plane()
    }

    pub fn input_len(&self) -> usize {
        voxels(self.input_dims)
    }

    /// Input dims of every conv block followed by the final pooled dims.
    pub fn stage_dims(&self) -> Vec<[usize; 3]> {
        let mut dims = vec![self.input_dims];
        for _ in &self.conv_channels {
            dims.push(pooled_dims(*dims.last().unwrap()));
        }
        dims
    }

    pub fn flat_features(&self) -> usize {
        voxels(*self.stage_dims().last().unwrap()) * self.conv_channels.last().unwrap()
    }

    pub fn fc_input(&self) -> usize {
        self.flat_features() + if self.variant == Variant::WithClass { self.n_regions } else { 0 }
    }

    /// `[in, out]` of each FC layer.
    pub fn fc_shapes(&self) -> Vec<[usize; 2]> {
        let mut widths = vec![self.fc_input()];
        widths.extend(&self.fc_widths);
        widths.push(self.out_size());
        widths.windows(2).map(|w| [w[0], w[1]]).collect()
    }

    pub fn n_heads(&self) -> usize {
        if self.variant == Variant::MultiHead {
            self.n_regions
        } else {
            1
        }
    }

    pub fn trunk_param_count(&self) -> usize {
        let mut cin = 1;
        let mut n = 0;
        for &c in &self.conv_channels {
            n += c * cin * 27 + 3 * c;
            cin = c;
        }
        n
    }

    pub fn head_param_count(&self) -> usize {
        self.fc_shapes().iter().map(|[i, o]| i * o + o).sum()
    }

    pub fn param_count(&self) -> usize {
        self.trunk_param_count() + self.n_heads() * self.head_param_count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(name: String, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { name, shape, data: vec![T::zero(); n] }
    }

    pub fn filled(name: String, shape: Vec<usize>, v: T) -> Self {
        let n = shape.iter().product();
        Self { name, shape, data: vec![v; n] }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { name: self.name.clone(), shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.f64())).collect() }
    }
}

/// How the class vector of the `with_class` variant is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassInput {
    /// One-hot of the sample's region.
    OneHot,
    /// Every node set to the same value.
    Constant(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

/// Trainable parameters and batch-norm running statistics.
///
/// Parameter order: for each conv block `i`, `conv{i}.weight`, `conv{i}.bias`,
/// `bn{i}.gamma`, `bn{i}.beta`; then for each head `h` and FC layer `k`,
/// `head{h}.fc{k}.weight`, `head{h}.fc{k}.bias`. Buffers hold
/// `bn{i}.running_mean` and `bn{i}.running_var`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    config: ModelConfig,
    params: Vec<Tensor<T>>,
    buffers: Vec<Tensor<T>>,
}

/// Gradients parallel to [`ModelState::params`].
pub type Grads<T> = Vec<Vec<T>>;

#[derive(Debug, Clone)]
struct BlockCache<T> {
    dims: [usize; 3],
    input: Vec<T>,
    pre_relu: Vec<T>,
    bn: BnCache<T>,
    argmax: Vec<u32>,
}

/// Forward pass results plus everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub outputs: Vec<T>,
    pub batch: usize,
    mode: Mode,
    heads: Vec<usize>,
    blocks: Vec<BlockCache<T>>,
    /// `fc_inputs[k]` is `batch x in_k`.
    fc_inputs: Vec<Vec<T>>,
    /// Pre-activations of the hidden FC layers.
    fc_pre: Vec<Vec<T>>,
}

impl<T: Real> Forward<T> {
    /// True when both passes took the same ReLU and max-pool branches, i.e.
    /// the network is smooth on the segment between the two inputs.
    pub fn same_switches(&self, other: &Forward<T>) -> bool {
        let pos = |v: &Vec<T>| v.iter().map(|&x| x > T::zero()).collect::<Vec<_>>();
        self.blocks.len() == other.blocks.len()
            && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.argmax == b.argmax && pos(&a.pre_relu) == pos(&b.pre_relu))
            && self.fc_pre.iter().zip(&other.fc_pre).all(|(a, b)| pos(a) == pos(b))
    }

    pub fn output(&self, sample: usize) -> &[T] {
        let n = self.outputs.len() / self.batch;
        &self.outputs[sample * n..(sample + 1) * n]
    }
}

impl<T: Real> ModelState<T> {
    /// He-normal initialization (`std = sqrt(2 / fan_in)`), zero biases,
    /// unit batch-norm scale.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, &[0x1417]);
        let mut he = |fan_in: usize, n: usize| -> Vec<T> {
            let d = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            (0..n).map(|_| T::of(d.sample(&mut rng))).collect()
        };
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let mut cin = 1;
        for (i, &c) in config.conv_channels.iter().enumerate() {
            let shape = vec![c, cin, 3, 3, 3];
            params.push(Tensor { name: format!("conv{i}.weight"), data: he(cin * 27, c * cin * 27), shape });
            params.push(Tensor::zeros(format!("conv{i}.bias"), vec![c]));
            params.push(Tensor::filled(format!("bn{i}.gamma"), vec![c], T::one()));
            params.push(Tensor::zeros(format!("bn{i}.beta"), vec![c]));
            buffers.push(Tensor::zeros(format!("bn{i}.running_mean"), vec![c]));
            buffers.push(Tensor::filled(format!("bn{i}.running_var"), vec![c], T::one()));
            cin = c;
        }
        for h in 0..config.n_heads() {
            for (k, [i, o]) in config.fc_shapes().into_iter().enumerate() {
                params.push(Tensor { name: format!("head{h}.fc{k}.weight"), data: he(i, i * o), shape: vec![o, i] });
                params.push(Tensor::zeros(format!("head{h}.fc{k}.bias"), vec![o]));
            }
        }
        Ok(Self { config: config.clone(), params, buffers })
    }

    pub fn from_parts(config: ModelConfig, params: Vec<Tensor<T>>, buffers: Vec<Tensor<T>>) -> Result<Self> {
        let reference = Self::init(&config, 0)?;
        let check = |a: &[Tensor<T>], b: &[Tensor<T>]| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.name == y.name && x.shape == y.shape && x.data.len() == y.data.len())
        };
        if !check(&params, &reference.params) || !check(&buffers, &reference.buffers) {
            return Err(Error::ShapeMismatch("tensor table does not match the model configuration".into()));
        }
        let s = Self { config, params, buffers };
        if !s.is_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(s)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Tensor<T>] {
        &self.buffers
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|t| t.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().chain(&self.buffers).all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            buffers: self.buffers.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn zero_grads(&self) -> Grads<T> {
        self.params.iter().map(|t| vec![T::zero(); t.data.len()]).collect()
    }

    fn n_conv(&self) -> usize {
        self.config.conv_channels.len()
    }

    fn fc_index(&self, head: usize, layer: usize) -> usize {
        4 * self.n_conv() + 2 * (head * self.config.fc_shapes().len() + layer)
    }

    /// Parameter indices belonging to head `h` (all FC parameters for
    /// single-head variants).
    pub fn head_param_indices(&self, h: usize) -> std::ops::Range<usize> {
        let per_head = 2 * self.config.fc_shapes().len();
        let start = 4 * self.n_conv() + h * per_head;
        start..start + per_head
    }

    pub fn trunk_param_indices(&self) -> std::ops::Range<usize> {
        0..4 * self.n_conv()
    }

    fn head_for(&self, regions: &[BodyRegion], batch: usize) -> Result<Vec<usize>> {
        let needs_regions = self.config.variant != Variant::Baseline;
        if regions.is_empty() && needs_regions {
            return Err(Error::ShapeMismatch(format!("variant {} needs a region per sample", self.config.variant)));
        }
        if !regions.is_empty() && regions.len() != batch {
            return Err(Error::ShapeMismatch(format!("{} regions for a batch of {batch}", regions.len())));
        }
        if let Some(r) = regions.iter().find(|r| r.index() >= self.config.n_regions) {
            return Err(Error::UnknownRegion(r.index()));
        }
        Ok(match self.config.variant {
            Variant::MultiHead => regions.iter().map(|r| r.index()).collect(),
            _ => vec![0; batch],
        })
    }

    /// Runs a batch of `input.len() / input_len` volumes. `regions` may be
    /// empty for the baseline variant.
    pub fn forward(&self, input: &[T], regions: &[BodyRegion], class: ClassInput, mode: Mode) -> Result<Forward<T>> {
        let cfg = &self.config;
        let n_in = cfg.input_len();
        if input.is_empty() || !input.len().is_multiple_of(n_in) {
            return Err(Error::ShapeMismatch(format!("input of {} values is not a batch of {:?} volumes", input.len(), cfg.input_dims)));
        }
        let batch = input.len() / n_in;
        let heads = self.head_for(regions, batch)?;
        let mut blocks = Vec::with_capacity(self.n_conv());
        let mut x = input.to_vec();
        let mut dims = cfg.input_dims;
        let mut cin = 1;
        for (i, &cout) in cfg.conv_channels.iter().enumerate() {
            let p = &self.params[4 * i..4 * i + 4];
            let pre = conv3d_forward(&x, batch, cin, dims, &p[0].data, &p[1].data, cout);
            let act = relu(&pre);
            let spatial = voxels(dims);
            let (normed, bn) = match mode {
                Mode::Train => batchnorm_train(&act, batch, cout, spatial, &p[2].data, &p[3].data),
                Mode::Eval => {
                    let (rm, rv) = (&self.buffers[2 * i].data, &self.buffers[2 * i + 1].data);
                    let (y, inv_std) = batchnorm_eval(&act, batch, cout, spatial, &p[2].data, &p[3].data, rm, rv);
                    // eval backward recomputes xhat from the activations
                    (y, BnCache { xhat: act, inv_std, mean: rm.clone(), var: rv.clone(), count: batch * spatial })
                }
            };
            let (pooled, argmax, out_dims) = maxpool_forward(&normed, batch * cout, dims);
            blocks.push(BlockCache { dims, input: x, pre_relu: pre, bn, argmax });
            x = pooled;
            dims = out_dims;
            cin = cout;
        }
        let flat = cfg.flat_features();
        let fc_in = cfg.fc_input();
        let mut h = Vec::with_capacity(batch * fc_in);
        for b in 0..batch {
            h.extend_from_slice(&x[b * flat..(b + 1) * flat]);
            if cfg.variant == Variant::WithClass {
                for r in 0..cfg.n_regions {
                    h.push(match class {
                        ClassInput::OneHot => T::of(if regions[b].index() == r { 1.0 } else { 0.0 }),
                        ClassInput::Constant(v) => T::of(v),
                    });
                }
            }
        }
        let shapes = cfg.fc_shapes();
        let mut fc_inputs = Vec::with_capacity(shapes.len());
        let mut fc_pre = Vec::with_capacity(shapes.len() - 1);
        for (k, &[i_n, o_n]) in shapes.iter().enumerate() {
            let mut out = Vec::with_capacity(batch * o_n);
            for b in 0..batch {
                let wi = self.fc_index(heads[b], k);
                out.extend(linear_forward(&h[b * i_n..(b + 1) * i_n], &self.params[wi].data, &self.params[wi + 1].data));
            }
            fc_inputs.push(h);
            if k + 1 < shapes.len() {
                h = relu(&out);
                fc_pre.push(out);
            } else {
                h = out;
            }
        }
        Ok(Forward { outputs: h, batch, mode, heads, blocks, fc_inputs, fc_pre })
    }

    /// Gradients of a loss with output gradient `d_out` (`batch x out_size`).
    pub fn backward(&self, fwd: &Forward<T>, d_out: &[T]) -> Result<Grads<T>> {
        let cfg = &self.config;
        if d_out.len() != fwd.outputs.len() {
            return Err(Error::ShapeMismatch(format!("output gradient has {} values, expected {}", d_out.len(), fwd.outputs.len())));
        }
        let batch = fwd.batch;
        let mut grads = self.zero_grads();
        let shapes = cfg.fc_shapes();
        let mut d = d_out.to_vec();
        for k in (0..shapes.len()).rev() {
            let [i_n, o_n] = shapes[k];
            let mut d_prev = Vec::with_capacity(batch * i_n);
            for b in 0..batch {
                let wi = self.fc_index(fwd.heads[b], k);
                let (gw, rest) = grads[wi..].split_at_mut(1);
                d_prev.extend(linear_backward(
                    &fwd.fc_inputs[k][b * i_n..(b + 1) * i_n],
                    &d[b * o_n..(b + 1) * o_n],
                    &self.params[wi].data,
                    &mut gw[0],
                    &mut rest[0],
                ));
            }
            if k > 0 {
                relu_backward(&fwd.fc_pre[k - 1], &mut d_prev);
            }
            d = d_prev;
        }
        // drop the class inputs
        let flat = cfg.flat_features();
        let fc_in = cfg.fc_input();
        let mut d_x: Vec<T> = (0..batch).flat_map(|b| d[b * fc_in..b * fc_in + flat].to_vec()).collect();
        for i in (0..self.n_conv()).rev() {
            let blk = &fwd.blocks[i];
            let cout = cfg.conv_channels[i];
            let cin = if i == 0 { 1 } else { cfg.conv_channels[i - 1] };
            let spatial = voxels(blk.dims);
            let d_norm = maxpool_backward(&d_x, &blk.argmax, batch * cout * spatial);
            let gamma = &self.params[4 * i + 2].data;
            let (mut d_act, d_gamma, d_beta) = match fwd.mode {
                Mode::Train => batchnorm_train_backward(&d_norm, &blk.bn, batch, cout, spatial, gamma),
                Mode::Eval => batchnorm_eval_backward(&d_norm, &blk.bn.xhat, &blk.bn.mean, &blk.bn.inv_std, batch, cout, spatial, gamma),
            };
            relu_backward(&blk.pre_relu, &mut d_act);
            let (d_in, d_w, d_b) =
                conv3d_backward(&blk.input, &d_act, batch, cin, blk.dims, &self.params[4 * i].data, cout, i > 0);
            grads[4 * i] = d_w;
            grads[4 * i + 1] = d_b;
            grads[4 * i + 2] = d_gamma;
            grads[4 * i + 3] = d_beta;
            if let Some(d_in) = d_in {
                d_x = d_in;
            }
        }
        Ok(grads)
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics (exponential average, unbiased variance).
    pub fn update_running_stats(&mut self, fwd: &Forward<T>) {
        if fwd.mode != Mode::Train {
            return;
        }
        let m = T::of(BN_MOMENTUM);
        for (i, blk) in fwd.blocks.iter().enumerate() {
            let n = blk.bn.count as f64;
            let unbias = T::of(if n > 1.0 { n / (n - 1.0) } else { 1.0 });
            for c in 0..blk.bn.mean.len() {
                let rm = &mut self.buffers[2 * i].data[c];
                *rm = (T::one() - m) * *rm + m * blk.bn.mean[c];
                let rv = &mut self.buffers[2 * i + 1].data[c];
                *rv = (T::one() - m) * *rv + m * blk.bn.var[c] * unbias;
            }
        }
    }

    /// Eval-mode prediction for one normalized volume.
    pub fn predict_raw(&self, input: &[T], region: BodyRegion, class: ClassInput) -> Result<Vec<f64>> {
        let fwd = self.forward(input, &[region], class, Mode::Eval)?;
        Ok(fwd.outputs.iter().map(|v| v.f64()).collect())
    }

    /// Eval-mode prediction decoded into planes (before plane coupling).
    pub fn predict_planes(&self, input: &[T], region: BodyRegion, meta: &VolumeMeta) -> Result<PlaneTriplet> {
        let raw = self.predict_raw(input, region, ClassInput::OneHot)?;
        outputs_to_planes(&raw, self.config.repr, region, meta)
    }
}

/// Regression target for one annotation: per plane, the normalized centre
/// followed by the encoding of the plane frame `[e_u e_v e_w]`.
pub fn planes_to_target(planes: &PlaneTriplet, repr: RepresentationKind, meta: &VolumeMeta) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(3 * (3 + repr.size()));
    for p in planes.planes() {
        out.extend(normalize_translation(p.center(), meta)?.iter());
        out.extend_from_slice(encode(&p.frame(), repr)?.values());
    }
    Ok(out)
}

/// Inverse of [`planes_to_target`] for raw network outputs.
pub fn outputs_to_planes(raw: &[f64], repr: RepresentationKind, region: BodyRegion, meta: &VolumeMeta) -> Result<PlaneTriplet> {
    let k = 3 + repr.size();
    if raw.len() != 3 * k {
        return Err(Error::ShapeMismatch(format!("{} outputs for representation {repr}, expected {}", raw.len(), 3 * k)));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("network outputs"));
    }
    let mut planes = Vec::with_capacity(3);
    for j in 0..3 {
        let chunk = &raw[j * k..(j + 1) * k];
        let center = denormalize_translation(&crate::geometry::Vec3::new(chunk[0], chunk[1], chunk[2]), meta);
        let r = decode(&RotationEncoding::from_raw(repr, &chunk[3..])?)?;
        planes.push(Plane::new(center, r.column(0).into_owned(), r.column(1).into_owned())?);
    }
    let [a, c, s]: [Plane; 3] = planes.try_into().expect("three planes");
    Ok(PlaneTriplet::from_planes([a, c, s], region))
}

/// Random inputs for tests and benchmarks.
pub fn random_input<T: Real>(cfg: &ModelConfig, batch: usize, seed: u64) -> Vec<T> {
    let mut rng = rng_for(seed, &[0x1A9]);
    (0..batch * cfg.input_len()).map(|_| T::of(rng.gen_range(0.0..1.0))).collect()
}
