use std::collections::HashMap;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;
use crate::kinematics::TaskTrajectory;
use crate::rng::{stream, Purpose};

use super::input::pooled_counts;
use super::{Head, NetInput, NetworkSpec, Variant};

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const BN_MOMENTUM: f64 = 0.1;

/// Scalar type of a model: `f32` for training and planning, `f64` for
/// finite-difference checks.
pub trait Real:
    Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + Default + 'static
{
}

impl<T> Real for T where
    T: Float + FromPrimitive + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + Default + 'static
{
}

#[inline]
pub(crate) fn cst<T: Real>(x: f64) -> T {
    T::from_f64(x).unwrap()
}

#[inline]
fn f64_of<T: Real>(x: T) -> f64 {
    x.to_f64().unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named parameter tensor. Buffers (batch-norm running statistics) live
/// outside the trainable vector and receive no gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub dims: Vec<usize>,
    pub buffer: bool,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
struct BnSlots {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    out_dims: [usize; 3],
    cin: usize,
    cout: usize,
    w: usize,
    bn: BnSlots,
    /// Row `o` of the gather table is `gather[start[o]..start[o + 1]]`,
    /// pairs of (kernel tap, input position).
    start: Vec<u32>,
    gather: Vec<(u32, u32)>,
    /// First layer only: border class of each output position and the
    /// in-bounds taps of each class.
    class_of: Vec<u32>,
    class_taps: Vec<Vec<u32>>,
}

impl ConvLayer {
    fn out_positions(&self) -> usize {
        self.out_dims.iter().product()
    }

    fn row(&self, o: usize) -> &[(u32, u32)] {
        &self.gather[self.start[o] as usize..self.start[o + 1] as usize]
    }
}

#[derive(Debug, Clone)]
struct DenseLayer {
    nin: usize,
    nout: usize,
    w: usize,
    bias: Option<usize>,
    bn: Option<BnSlots>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Real = f32> {
    spec: NetworkSpec,
    mode: Mode,
    pub(crate) theta: Vec<T>,
    pub(crate) stats: Vec<T>,
    tensors: Vec<TensorInfo>,
    layers: Layers,
}

#[derive(Debug, Clone)]
struct Layers {
    convs: Vec<ConvLayer>,
    /// Hidden layers followed by the output layer.
    dense: Vec<DenseLayer>,
}

// Layer geometry is a function of the spec, which is compared separately.
impl PartialEq for Layers {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

struct Builder {
    tensors: Vec<TensorInfo>,
    n_theta: usize,
    n_stats: usize,
}

impl Builder {
    fn add(&mut self, name: String, dims: Vec<usize>, buffer: bool) -> usize {
        let len: usize = dims.iter().product();
        let counter = if buffer { &mut self.n_stats } else { &mut self.n_theta };
        let offset = *counter;
        *counter += len;
        self.tensors.push(TensorInfo {
            name,
            dims,
            buffer,
            offset,
        });
        offset
    }

    fn bn(&mut self, prefix: &str, c: usize) -> BnSlots {
        BnSlots {
            gamma: self.add(format!("{prefix}.bn.weight"), vec![c], false),
            beta: self.add(format!("{prefix}.bn.bias"), vec![c], false),
            mean: self.add(format!("{prefix}.bn.running_mean"), vec![c], true),
            var: self.add(format!("{prefix}.bn.running_var"), vec![c], true),
        }
    }
}

/// Output dims, gather row starts, gather pairs, border class per output
/// position and in-bounds taps per class.
type ConvGeometry = ([usize; 3], Vec<u32>, Vec<(u32, u32)>, Vec<u32>, Vec<Vec<u32>>);

fn conv_geometry(in_dims: [usize; 3], stride: usize, first: bool) -> ConvGeometry {
    let out_dims = in_dims.map(|n| (n - 1) / stride + 1);
    let [nx, ny, nz] = in_dims;
    let mut start = vec![0u32];
    let mut gather = Vec::new();
    let mut class_of = Vec::new();
    let mut class_taps: Vec<Vec<u32>> = Vec::new();
    let mut class_ids: HashMap<u32, u32> = HashMap::new();
    for oz in 0..out_dims[2] {
        for oy in 0..out_dims[1] {
            for ox in 0..out_dims[0] {
                let mut mask = 0u32;
                let mut taps = Vec::new();
                for tz in 0..3 {
                    for ty in 0..3 {
                        for tx in 0..3 {
                            let ix = (ox * stride + tx) as isize - 1;
                            let iy = (oy * stride + ty) as isize - 1;
                            let iz = (oz * stride + tz) as isize - 1;
                            if ix < 0 || iy < 0 || iz < 0 || ix >= nx as isize || iy >= ny as isize || iz >= nz as isize
                            {
                                continue;
                            }
                            let k = (tz * 3 + ty) * 3 + tx;
                            let i = ix as usize + nx * (iy as usize + ny * iz as usize);
                            gather.push((k as u32, i as u32));
                            mask |= 1 << k;
                            taps.push(k as u32);
                        }
                    }
                }
                start.push(gather.len() as u32);
                if first {
                    let next = class_ids.len() as u32;
                    let id = *class_ids.entry(mask).or_insert_with(|| {
                        class_taps.push(taps);
                        next
                    });
                    class_of.push(id);
                }
            }
        }
    }
    (out_dims, start, gather, class_of, class_taps)
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum BnMode {
    Batch,
    Running,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct LayerCache<T> {
    pub xhat: Vec<T>,
    pub y: Vec<T>,
    pub invstd: Vec<T>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub rows: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Cache<T> {
    pub n: usize,
    pub bn: BnMode,
    pub conv: Vec<LayerCache<T>>,
    /// Input of the first dense layer.
    pub feat: Vec<T>,
    pub dense: Vec<LayerCache<T>>,
    pub logits: Vec<T>,
}

impl<T: Real> Cache<T> {
    /// ReLU activation pattern, used to detect kinks in finite differences.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.conv
            .iter()
            .chain(&self.dense)
            .flat_map(|l| l.y.iter().map(|v| *v > T::zero()))
            .collect()
    }
}

impl<T: Real> Model<T> {
    /// Model with zero weights, unit batch-norm scale and unit running
    /// variance, in train mode.
    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.check()?;
        let mut b = Builder {
            tensors: Vec::new(),
            n_theta: 0,
            n_stats: 0,
        };
        let mut convs = Vec::new();
        let mut dense = Vec::new();
        let mut width = 6;
        if spec.variant == Variant::VoxelNet {
            let mut dims = spec.input_dims;
            let mut cin = NetworkSpec::CHANNELS;
            for (j, block) in spec.conv_blocks.iter().enumerate() {
                let name = format!("conv{j}");
                let w = b.add(format!("{name}.weight"), vec![27, cin, block.out_channels], false);
                let bn = b.bn(&name, block.out_channels);
                let (out_dims, start, gather, class_of, class_taps) = conv_geometry(dims, block.stride, j == 0);
                convs.push(ConvLayer {
                    out_dims,
                    cin,
                    cout: block.out_channels,
                    w,
                    bn,
                    start,
                    gather,
                    class_of,
                    class_taps,
                });
                dims = out_dims;
                cin = block.out_channels;
            }
            width = cin;
        }
        for (j, &nout) in spec.fc_widths.iter().enumerate() {
            let name = format!("fc{j}");
            let w = b.add(format!("{name}.weight"), vec![width, nout], false);
            let bn = b.bn(&name, nout);
            dense.push(DenseLayer {
                nin: width,
                nout,
                w,
                bias: None,
                bn: Some(bn),
            });
            width = nout;
        }
        let w = b.add("out.weight".into(), vec![width, 1], false);
        let bias = b.add("out.bias".into(), vec![1], false);
        dense.push(DenseLayer {
            nin: width,
            nout: 1,
            w,
            bias: Some(bias),
            bn: None,
        });

        let mut theta = vec![T::zero(); b.n_theta];
        let mut stats = vec![T::zero(); b.n_stats];
        for t in &b.tensors {
            if t.name.ends_with(".bn.weight") {
                theta[t.offset..t.offset + t.len()].fill(T::one());
            }
            if t.name.ends_with(".bn.running_var") {
                stats[t.offset..t.offset + t.len()].fill(T::one());
            }
        }
        Ok(Model {
            spec: spec.clone(),
            mode: Mode::Train,
            theta,
            stats,
            tensors: b.tensors,
            layers: Layers { convs, dense },
        })
    }

    /// Seeded fan-in scaled uniform initialization.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut m = Self::zeros(spec)?;
        let mut rng = stream(seed, Purpose::Init, 0);
        for t in m.tensors.clone() {
            if t.buffer || !t.name.ends_with(".weight") || t.name.ends_with(".bn.weight") {
                continue;
            }
            let fan_in: usize = t.dims[..t.dims.len() - 1].iter().product();
            let gain = if t.name.starts_with("out.") { 1.0 } else { 6.0 };
            let bound = (gain / fan_in as f64).sqrt();
            for v in &mut m.theta[t.offset..t.offset + t.len()] {
                *v = cst(rng.random_range(-bound..bound));
            }
        }
        Ok(m)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.theta.len()
    }

    pub fn params(&self) -> &[T] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.theta
    }

    pub fn running_stats(&self) -> &[T] {
        &self.stats
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        let t = self.tensors.iter().find(|t| t.name == name)?;
        let src = if t.buffer { &self.stats } else { &self.theta };
        Some(&src[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let t = self.tensors.iter().find(|t| t.name == name)?.clone();
        let src = if t.buffer { &mut self.stats } else { &mut self.theta };
        Some(&mut src[t.offset..t.offset + t.len()])
    }

    /// Converts the scalar type, e.g. an `f32` model to `f64` for checks.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| cst::<U>(f64_of(*x))).collect();
        Model {
            spec: self.spec.clone(),
            mode: self.mode,
            theta: conv(&self.theta),
            stats: conv(&self.stats),
            tensors: self.tensors.clone(),
            layers: self.layers.clone(),
        }
    }

    /// Maps the raw network output to a probability or a volume in cm³.
    pub fn output_value(&self, logit: f64) -> f64 {
        match self.spec.head {
            Head::Classifier => (1.0 / (1.0 + (-logit).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0),
            Head::Regressor => logit * self.spec.volume_scale,
        }
    }

    fn check_input(&self, x: &NetInput) -> Result<()> {
        let cells: usize = self.spec.input_dims.iter().product();
        if x.occ.iter().any(|&(i, _)| i as usize >= cells) {
            return Err(Error::Spec("occupancy index outside the network input".into()));
        }
        if self.spec.variant == Variant::TrajNet && !x.occ.is_empty() {
            return Err(Error::Spec("traj_net takes no occupancy".into()));
        }
        Ok(())
    }

    /// Eval-mode predictions (probabilities or cm³).
    pub fn predict(&self, inputs: &[NetInput]) -> Result<Vec<f64>> {
        if self.mode != Mode::Eval {
            return Err(Error::Mode("train"));
        }
        for x in inputs {
            self.check_input(x)?;
        }
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(32) {
            let refs: Vec<&NetInput> = chunk.iter().collect();
            let cache = self.forward(&refs, BnMode::Running);
            out.extend(cache.logits.iter().map(|z| self.output_value(f64_of(*z))));
        }
        Ok(out)
    }

    /// Raw outputs for a batch, plus everything backward needs.
    pub(crate) fn forward(&self, inputs: &[&NetInput], bn: BnMode) -> Cache<T> {
        let n = inputs.len();
        let first = match self.spec.variant {
            Variant::VoxelNet => {
                let l = &self.layers.convs[0];
                let per = l.out_positions() * l.cout;
                let mut z = vec![T::zero(); n * per];
                let mut scratch = vec![T::zero(); self.spec.input_dims.iter().product()];
                for (x, zs) in inputs.iter().zip(z.chunks_mut(per)) {
                    self.occupancy_preact(x, &mut scratch, zs);
                    self.add_param_preact(&x.params, zs);
                }
                z
            }
            Variant::TrajNet => inputs
                .iter()
                .flat_map(|x| x.params.iter().map(|p| cst::<T>(*p)))
                .collect(),
        };
        self.forward_from(n, first, bn)
    }

    fn occupancy_scale(&self) -> T {
        cst(1.0 / self.spec.pool.pow(3) as f64)
    }

    fn fill_scratch(&self, x: &NetInput, scratch: &mut [T]) {
        scratch.fill(T::zero());
        let s = self.occupancy_scale();
        for &(i, c) in &x.occ {
            scratch[i as usize] = cst::<T>(c as f64) * s;
        }
    }

    /// First conv layer applied to the occupancy channel alone.
    fn occupancy_preact(&self, x: &NetInput, scratch: &mut [T], z: &mut [T]) {
        let l = &self.layers.convs[0];
        self.fill_scratch(x, scratch);
        let w = &self.theta[l.w..l.w + 27 * l.cin * l.cout];
        let c = l.cout;
        for (o, zo) in z.chunks_exact_mut(c).enumerate() {
            for &(k, i) in l.row(o) {
                let a = scratch[i as usize];
                if a == T::zero() {
                    continue;
                }
                let wk = &w[(k as usize * l.cin) * c..][..c];
                for (zz, ww) in zo.iter_mut().zip(wk) {
                    *zz += a * *ww;
                }
            }
        }
    }

    /// Adds the contribution of the six constant parameter channels. Each
    /// output position sums the kernel over its in-bounds taps only, which
    /// depends on the position through its border class.
    fn add_param_preact(&self, params: &[f64; 6], z: &mut [T]) {
        let l = &self.layers.convs[0];
        let c = l.cout;
        let w = &self.theta[l.w..l.w + 27 * l.cin * c];
        let p: Vec<T> = params.iter().map(|v| cst(*v)).collect();
        let mut per_class = vec![T::zero(); l.class_taps.len() * c];
        for (taps, acc) in l.class_taps.iter().zip(per_class.chunks_exact_mut(c)) {
            for &k in taps {
                for ch in 1..l.cin {
                    let wk = &w[(k as usize * l.cin + ch) * c..][..c];
                    let pc = p[ch - 1];
                    for (a, ww) in acc.iter_mut().zip(wk) {
                        *a += pc * *ww;
                    }
                }
            }
        }
        for (zo, &cl) in z.chunks_exact_mut(c).zip(&l.class_of) {
            let add = &per_class[cl as usize * c..][..c];
            for (zz, a) in zo.iter_mut().zip(add) {
                *zz += *a;
            }
        }
    }

    pub(crate) fn forward_from(&self, n: usize, first: Vec<T>, bn: BnMode) -> Cache<T> {
        let mut cache = Cache {
            n,
            bn,
            conv: Vec::with_capacity(self.layers.convs.len()),
            feat: Vec::new(),
            dense: Vec::with_capacity(self.layers.dense.len()),
            logits: Vec::new(),
        };
        let mut first = Some(first);
        for (j, l) in self.layers.convs.iter().enumerate() {
            let p = l.out_positions();
            let z = if j == 0 {
                first.take().unwrap()
            } else {
                let prev = &self.layers.convs[j - 1];
                let x = &cache.conv[j - 1].y;
                let pin = prev.out_positions() * prev.cout;
                let mut z = vec![T::zero(); n * p * l.cout];
                for (xs, zs) in x.chunks_exact(pin).zip(z.chunks_exact_mut(p * l.cout)) {
                    conv_forward(l, &self.theta[l.w..], xs, zs);
                }
                z
            };
            cache.conv.push(self.batch_norm_relu(z, n * p, l.cout, l.bn, bn));
        }
        cache.feat = match self.layers.convs.last() {
            Some(l) => {
                let p = l.out_positions();
                let c = l.cout;
                let inv = cst::<T>(1.0 / p as f64);
                let y = &cache.conv.last().unwrap().y;
                let mut feat = vec![T::zero(); n * c];
                for (ys, f) in y.chunks_exact(p * c).zip(feat.chunks_exact_mut(c)) {
                    for row in ys.chunks_exact(c) {
                        for (a, v) in f.iter_mut().zip(row) {
                            *a += *v;
                        }
                    }
                    for a in f.iter_mut() {
                        *a *= inv;
                    }
                }
                feat
            }
            None => first.take().unwrap(),
        };
        let n_dense = self.layers.dense.len();
        for (j, l) in self.layers.dense.iter().enumerate() {
            let x = if j == 0 { &cache.feat } else { &cache.dense[j - 1].y };
            let mut z = vec![T::zero(); n * l.nout];
            dense_forward(l, &self.theta, x, &mut z);
            if j + 1 == n_dense {
                cache.logits = z;
            } else {
                cache.dense.push(self.batch_norm_relu(z, n, l.nout, l.bn.unwrap(), bn));
            }
        }
        cache
    }

    fn batch_norm_relu(&self, z: Vec<T>, rows: usize, c: usize, s: BnSlots, mode: BnMode) -> LayerCache<T> {
        let (mean, var) = match mode {
            BnMode::Batch => {
                let mut mean = vec![0.0; c];
                for row in z.chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += f64_of(*v);
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; c];
                for row in z.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = f64_of(*v) - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= rows as f64);
                (mean, var)
            }
            BnMode::Running => (
                self.stats[s.mean..s.mean + c].iter().map(|v| f64_of(*v)).collect(),
                self.stats[s.var..s.var + c].iter().map(|v| f64_of(*v)).collect(),
            ),
        };
        let invstd: Vec<T> = var.iter().map(|v| cst(1.0 / (v + BN_EPS).sqrt())).collect();
        let mu: Vec<T> = mean.iter().map(|m| cst(*m)).collect();
        let gamma = &self.theta[s.gamma..s.gamma + c];
        let beta = &self.theta[s.beta..s.beta + c];
        let mut xhat = z;
        let mut y = vec![T::zero(); xhat.len()];
        for (xr, yr) in xhat.chunks_exact_mut(c).zip(y.chunks_exact_mut(c)) {
            for ch in 0..c {
                let h = (xr[ch] - mu[ch]) * invstd[ch];
                xr[ch] = h;
                let v = gamma[ch] * h + beta[ch];
                yr[ch] = if v > T::zero() { v } else { T::zero() };
            }
        }
        LayerCache {
            xhat,
            y,
            invstd,
            mean,
            var,
            rows,
        }
    }

    /// Folds the batch statistics of a train-mode forward into the running
    /// statistics.
    pub(crate) fn update_running_stats(&mut self, cache: &Cache<T>) {
        let slots: Vec<(BnSlots, usize)> = self
            .layers
            .convs
            .iter()
            .map(|l| (l.bn, l.cout))
            .chain(self.layers.dense.iter().filter_map(|l| l.bn.map(|b| (b, l.nout))))
            .collect();
        for ((s, c), lc) in slots.into_iter().zip(cache.conv.iter().chain(&cache.dense)) {
            let unbias = if lc.rows > 1 {
                lc.rows as f64 / (lc.rows - 1) as f64
            } else {
                1.0
            };
            for ch in 0..c {
                let m = &mut self.stats[s.mean + ch];
                *m = cst(f64_of(*m) * (1.0 - BN_MOMENTUM) + BN_MOMENTUM * lc.mean[ch]);
                let v = &mut self.stats[s.var + ch];
                *v = cst(f64_of(*v) * (1.0 - BN_MOMENTUM) + BN_MOMENTUM * lc.var[ch] * unbias);
            }
        }
    }

    /// Accumulates parameter gradients of `Σ dlogits · logits` into `grad`.
    pub(crate) fn backward(&self, inputs: &[&NetInput], cache: &Cache<T>, dlogits: &[T], grad: &mut [T]) {
        let n = cache.n;
        let nd = self.layers.dense.len();
        let mut dz = dlogits.to_vec();
        for j in (0..nd).rev() {
            let l = &self.layers.dense[j];
            if j + 1 < nd {
                dz = self.batch_norm_relu_backward(&cache.dense[j], dz, l.nout, l.bn.unwrap(), cache.bn, grad);
            }
            let x = if j == 0 { &cache.feat } else { &cache.dense[j - 1].y };
            let mut dx = vec![T::zero(); n * l.nin];
            dense_backward(l, &self.theta, x, &dz, grad, &mut dx);
            dz = dx;
        }
        if self.layers.convs.is_empty() {
            return;
        }

        let last = self.layers.convs.last().unwrap();
        let p = last.out_positions();
        let c = last.cout;
        let inv = cst::<T>(1.0 / p as f64);
        let mut dy = vec![T::zero(); n * p * c];
        for (ds, f) in dy.chunks_exact_mut(p * c).zip(dz.chunks_exact(c)) {
            for row in ds.chunks_exact_mut(c) {
                for (d, g) in row.iter_mut().zip(f) {
                    *d = *g * inv;
                }
            }
        }
        for j in (0..self.layers.convs.len()).rev() {
            let l = &self.layers.convs[j];
            let dz = self.batch_norm_relu_backward(&cache.conv[j], dy, l.cout, l.bn, cache.bn, grad);
            let per = l.out_positions() * l.cout;
            if j == 0 {
                self.first_layer_backward(inputs, &dz, grad);
                break;
            }
            let prev = &self.layers.convs[j - 1];
            let pin = prev.out_positions() * prev.cout;
            let x = &cache.conv[j - 1].y;
            let mut dx = vec![T::zero(); n * pin];
            let (w, gw) = (&self.theta[l.w..], &mut grad[l.w..]);
            for ((xs, dzs), dxs) in x
                .chunks_exact(pin)
                .zip(dz.chunks_exact(per))
                .zip(dx.chunks_exact_mut(pin))
            {
                conv_backward(l, w, xs, dzs, gw, dxs);
            }
            dy = dx;
        }
    }

    fn first_layer_backward(&self, inputs: &[&NetInput], dz: &[T], grad: &mut [T]) {
        let l = &self.layers.convs[0];
        let c = l.cout;
        let per = l.out_positions() * c;
        let mut scratch = vec![T::zero(); self.spec.input_dims.iter().product()];
        let gw = &mut grad[l.w..l.w + 27 * l.cin * c];
        let mut per_class = vec![T::zero(); l.class_taps.len() * c];
        for (x, dzs) in inputs.iter().zip(dz.chunks_exact(per)) {
            self.fill_scratch(x, &mut scratch);
            per_class.fill(T::zero());
            for (o, dzo) in dzs.chunks_exact(c).enumerate() {
                let acc = &mut per_class[l.class_of[o] as usize * c..][..c];
                for (a, d) in acc.iter_mut().zip(dzo) {
                    *a += *d;
                }
                for &(k, i) in l.row(o) {
                    let a = scratch[i as usize];
                    if a == T::zero() {
                        continue;
                    }
                    let g = &mut gw[(k as usize * l.cin) * c..][..c];
                    for (gg, d) in g.iter_mut().zip(dzo) {
                        *gg += a * *d;
                    }
                }
            }
            for (taps, acc) in l.class_taps.iter().zip(per_class.chunks_exact(c)) {
                for &k in taps {
                    for ch in 1..l.cin {
                        let pc = cst::<T>(x.params[ch - 1]);
                        let g = &mut gw[(k as usize * l.cin + ch) * c..][..c];
                        for (gg, a) in g.iter_mut().zip(acc) {
                            *gg += pc * *a;
                        }
                    }
                }
            }
        }
    }

    /// Gradient through ReLU and batch norm; returns the gradient of the
    /// pre-normalization activations.
    fn batch_norm_relu_backward(
        &self,
        lc: &LayerCache<T>,
        mut dy: Vec<T>,
        c: usize,
        s: BnSlots,
        mode: BnMode,
        grad: &mut [T],
    ) -> Vec<T> {
        let gamma = &self.theta[s.gamma..s.gamma + c];
        let mut sum_d = vec![0.0; c];
        let mut sum_dx = vec![0.0; c];
        for ((d, y), xh) in dy
            .chunks_exact_mut(c)
            .zip(lc.y.chunks_exact(c))
            .zip(lc.xhat.chunks_exact(c))
        {
            for ch in 0..c {
                if y[ch] <= T::zero() {
                    d[ch] = T::zero();
                    continue;
                }
                let g = f64_of(d[ch]);
                sum_d[ch] += g;
                sum_dx[ch] += g * f64_of(xh[ch]);
            }
        }
        for ch in 0..c {
            grad[s.gamma + ch] += cst(sum_dx[ch]);
            grad[s.beta + ch] += cst(sum_d[ch]);
        }
        let m = lc.rows as f64;
        match mode {
            BnMode::Batch => {
                let k1: Vec<T> = (0..c).map(|ch| gamma[ch] * lc.invstd[ch]).collect();
                let mean_d: Vec<T> = sum_d.iter().map(|v| cst(v / m)).collect();
                let mean_dx: Vec<T> = sum_dx.iter().map(|v| cst(v / m)).collect();
                for (d, xh) in dy.chunks_exact_mut(c).zip(lc.xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        d[ch] = k1[ch] * (d[ch] - mean_d[ch] - xh[ch] * mean_dx[ch]);
                    }
                }
            }
            BnMode::Running => {
                for d in dy.chunks_exact_mut(c) {
                    for ch in 0..c {
                        d[ch] = d[ch] * gamma[ch] * lc.invstd[ch];
                    }
                }
            }
        }
        dy
    }
}

fn conv_forward<T: Real>(l: &ConvLayer, w: &[T], x: &[T], z: &mut [T]) {
    let (cin, c) = (l.cin, l.cout);
    for (o, zo) in z.chunks_exact_mut(c).enumerate() {
        for &(k, i) in l.row(o) {
            let xi = &x[i as usize * cin..][..cin];
            let wk = &w[k as usize * cin * c..][..cin * c];
            for (a, wrow) in xi.iter().zip(wk.chunks_exact(c)) {
                if *a == T::zero() {
                    continue;
                }
                for (zz, ww) in zo.iter_mut().zip(wrow) {
                    *zz += *a * *ww;
                }
            }
        }
    }
}

fn conv_backward<T: Real>(l: &ConvLayer, w: &[T], x: &[T], dz: &[T], gw: &mut [T], dx: &mut [T]) {
    let (cin, c) = (l.cin, l.cout);
    for (o, dzo) in dz.chunks_exact(c).enumerate() {
        if dzo.iter().all(|v| *v == T::zero()) {
            continue;
        }
        for &(k, i) in l.row(o) {
            let xi = &x[i as usize * cin..][..cin];
            let dxi = &mut dx[i as usize * cin..][..cin];
            let wk = &w[k as usize * cin * c..][..cin * c];
            let gk = &mut gw[k as usize * cin * c..][..cin * c];
            for (((a, d), wrow), grow) in xi
                .iter()
                .zip(dxi.iter_mut())
                .zip(wk.chunks_exact(c))
                .zip(gk.chunks_exact_mut(c))
            {
                let mut s = T::zero();
                for (ww, g) in wrow.iter().zip(dzo) {
                    s += *ww * *g;
                }
                *d += s;
                if *a != T::zero() {
                    for (gg, g) in grow.iter_mut().zip(dzo) {
                        *gg += *a * *g;
                    }
                }
            }
        }
    }
}

fn dense_forward<T: Real>(l: &DenseLayer, theta: &[T], x: &[T], z: &mut [T]) {
    let w = &theta[l.w..l.w + l.nin * l.nout];
    for (xr, zr) in x.chunks_exact(l.nin).zip(z.chunks_exact_mut(l.nout)) {
        if let Some(b) = l.bias {
            zr.copy_from_slice(&theta[b..b + l.nout]);
        }
        for (a, wrow) in xr.iter().zip(w.chunks_exact(l.nout)) {
            if *a == T::zero() {
                continue;
            }
            for (zz, ww) in zr.iter_mut().zip(wrow) {
                *zz += *a * *ww;
            }
        }
    }
}

fn dense_backward<T: Real>(l: &DenseLayer, theta: &[T], x: &[T], dz: &[T], grad: &mut [T], dx: &mut [T]) {
    let w = &theta[l.w..l.w + l.nin * l.nout];
    for ((xr, dzr), dxr) in x
        .chunks_exact(l.nin)
        .zip(dz.chunks_exact(l.nout))
        .zip(dx.chunks_exact_mut(l.nin))
    {
        if let Some(b) = l.bias {
            for (g, d) in grad[b..b + l.nout].iter_mut().zip(dzr) {
                *g += *d;
            }
        }
        let gw = &mut grad[l.w..l.w + l.nin * l.nout];
        for (((a, d), wrow), grow) in xr
            .iter()
            .zip(dxr.iter_mut())
            .zip(w.chunks_exact(l.nout))
            .zip(gw.chunks_exact_mut(l.nout))
        {
            let mut s = T::zero();
            for (ww, g) in wrow.iter().zip(dzr) {
                s += *ww * *g;
            }
            *d = s;
            if *a != T::zero() {
                for (gg, g) in grow.iter_mut().zip(dzr) {
                    *gg += *a * *g;
                }
            }
        }
    }
}

/// A scene's occupancy pushed through the first conv layer once, so that
/// many trajectories can be scored against it cheaply.
pub struct SceneEncoding<'a, T: Real = f32> {
    model: &'a Model<T>,
    occ: Vec<T>,
}

impl<'a, T: Real> SceneEncoding<'a, T> {
    pub fn new(model: &'a Model<T>, voxels: Option<&VoxelGrid>) -> Result<Self> {
        if model.mode != Mode::Eval {
            return Err(Error::Mode("train"));
        }
        let occ = match model.spec.variant {
            Variant::TrajNet => Vec::new(),
            Variant::VoxelNet => {
                let v = voxels.ok_or_else(|| Error::Spec("voxel_net scoring needs a voxel grid".into()))?;
                let input = NetInput {
                    params: [0.0; 6],
                    occ: pooled_counts(&model.spec, v)?,
                };
                let l = &model.layers.convs[0];
                let mut z = vec![T::zero(); l.out_positions() * l.cout];
                let mut scratch = vec![T::zero(); model.spec.input_dims.iter().product()];
                model.occupancy_preact(&input, &mut scratch, &mut z);
                z
            }
        };
        Ok(SceneEncoding { model, occ })
    }

    pub fn model(&self) -> &Model<T> {
        self.model
    }

    fn predict_chunk(&self, trajs: &[TaskTrajectory]) -> Vec<f64> {
        let m = self.model;
        let n = trajs.len();
        let first = match m.spec.variant {
            Variant::VoxelNet => {
                let per = self.occ.len();
                let mut z = Vec::with_capacity(n * per);
                for t in trajs {
                    let start = z.len();
                    z.extend_from_slice(&self.occ);
                    m.add_param_preact(&m.spec.traj_ranges.normalize(t), &mut z[start..]);
                }
                z
            }
            Variant::TrajNet => trajs
                .iter()
                .flat_map(|t| m.spec.traj_ranges.normalize(t).map(cst::<T>))
                .collect(),
        };
        let cache = m.forward_from(n, first, BnMode::Running);
        cache.logits.iter().map(|z| m.output_value(f64_of(*z))).collect()
    }

    /// Scores in input order.
    pub fn predict(&self, trajs: &[TaskTrajectory]) -> Vec<f64> {
        const CHUNK: usize = 16;
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            trajs
                .par_chunks(CHUNK)
                .map(|c| self.predict_chunk(c))
                .collect::<Vec<_>>()
                .concat()
        }
        #[cfg(not(feature = "parallel"))]
        {
            trajs.chunks(CHUNK).flat_map(|c| self.predict_chunk(c)).collect()
        }
    }
}
