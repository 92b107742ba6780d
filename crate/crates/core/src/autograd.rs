//! Reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass together with its
//! output value. Learnable tensors live in a [`ParamStore`] and enter a graph
//! through [`Graph::param`]; a parameter used several times maps to a single
//! leaf, so its gradient is accumulated across uses.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State carried between steps but never differentiated (running stats).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

/// Owner of every learnable tensor and buffer of a network.
///
/// With `f32_storage` set, every write is rounded to single precision so the
/// store survives a round trip through a 32-bit checkpoint unchanged.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    f32_storage: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_f32_storage() -> Self {
        Self {
            entries: Vec::new(),
            f32_storage: true,
        }
    }

    pub fn f32_storage(&self) -> bool {
        self.f32_storage
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, mut value: Tensor) -> ParamId {
        if self.f32_storage {
            round_tensor(&mut value);
        }
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) -> Result<()> {
        let entry = &mut self.entries[id.0];
        if entry.value.shape() != value.shape() {
            return Err(contract!(
                "parameter {} has shape {:?}, got {:?}",
                entry.name,
                entry.value.shape(),
                value.shape()
            ));
        }
        if self.f32_storage {
            round_tensor(&mut value);
        }
        entry.value = value;
        Ok(())
    }

    /// Mutates a value in place and re-applies the storage precision.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut [f64])) {
        let round = self.f32_storage;
        let value = &mut self.entries[id.0].value;
        f(value.data_mut());
        if round {
            round_tensor(value);
        }
    }

    /// Number of scalar trainable parameters.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == ParamKind::Trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn apply_running_updates(&mut self, updates: Vec<(ParamId, Tensor)>) {
        for (id, value) in updates {
            // Shapes come from the same store, so this cannot fail.
            let _ = self.set(id, value);
        }
    }

    pub(crate) fn from_entries(entries: Vec<ParamEntry>, f32_storage: bool) -> Self {
        Self {
            entries,
            f32_storage,
        }
    }
}

fn round_tensor(t: &mut Tensor) {
    for v in t.data_mut() {
        *v = math::to_f32_precision(*v);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm normalises with batch statistics and emits running updates.
    Train,
    /// Batchnorm normalises with the stored running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror including the edge sample (`a b c | c b a`); needs `pad <= len`.
    Symmetric,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    /// Stride 1, dilation 1, "same" zero padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self {
            stride: 1,
            padding: kernel / 2,
            dilation: 1,
            groups: 1,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn dilated(kernel: usize, dilation: usize, pad_mode: PadMode) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel / 2),
            dilation,
            groups: 1,
            pad_mode,
        }
    }

    pub fn output_len(&self, len: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = len + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

const INVALID: usize = usize::MAX;

/// For each kernel tap and output position, the input index it reads
/// (after padding), or `INVALID` for a zero-padded tap.
fn axis_table(len_in: usize, len_out: usize, kernel: usize, spec: &ConvSpec) -> Vec<usize> {
    let mut table = vec![INVALID; kernel * len_out];
    for k in 0..kernel {
        for o in 0..len_out {
            let i = (o * spec.stride + k * spec.dilation) as isize - spec.padding as isize;
            let n = len_in as isize;
            let mapped = match spec.pad_mode {
                PadMode::Zero => i,
                PadMode::Symmetric => {
                    if i < 0 {
                        -i - 1
                    } else if i >= n {
                        2 * n - i - 1
                    } else {
                        i
                    }
                }
            };
            if mapped >= 0 && mapped < n {
                table[k * len_out + o] = mapped as usize;
            }
        }
    }
    table
}

/// Per-output-position linear interpolation taps along one axis
/// (half-pixel centres, edge clamped).
fn bilinear_taps(len_in: usize, factor: usize) -> Vec<(usize, usize, f64, f64)> {
    let len_out = len_in * factor;
    (0..len_out)
        .map(|o| {
            let src = (o as f64 + 0.5) / factor as f64 - 0.5;
            let src = src.max(0.0).min((len_in - 1) as f64);
            let i0 = math::floor(src) as usize;
            let i1 = (i0 + 1).min(len_in - 1);
            let frac = src - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

enum Op {
    Input,
    Param(ParamId),
    Conv {
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: ConvSpec,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    MulSpatial {
        x: usize,
        m: usize,
    },
    MulChannel {
        x: usize,
        g: usize,
    },
    Concat(Vec<usize>),
    Slice {
        x: usize,
        start: usize,
    },
    ChannelMean(usize),
    ChannelMax {
        x: usize,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(usize),
    Gram {
        a: usize,
        b: usize,
        scale: f64,
    },
    MixChannels {
        g: usize,
        s: usize,
    },
    Upsample {
        x: usize,
        factor: usize,
    },
    MaxPool {
        x: usize,
        argmax: Vec<u32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One recorded forward pass.
pub struct Graph<'s> {
    store: &'s ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    running_updates: Vec<(ParamId, Tensor)>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
            running_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let v = self.push(self.store.get(id).clone(), Op::Param(id));
        self.param_vars[id.0] = Some(v);
        v
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// Running-statistic updates produced by batchnorm layers in train mode,
    /// in execution order.
    pub fn take_running_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        core::mem::take(&mut self.running_updates)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        let [n, cin, h, wd] = xs;
        let [cout, cin_g, kh, kw] = ws;
        if spec.groups == 0 || cin != cin_g * spec.groups || cout % spec.groups != 0 {
            return Err(contract!(
                "conv2d: input {:?} incompatible with kernel {:?} (groups {})",
                xs,
                ws,
                spec.groups
            ));
        }
        if spec.pad_mode == PadMode::Symmetric && (spec.padding > h || spec.padding > wd) {
            return Err(contract!(
                "conv2d: symmetric padding {} exceeds a {}x{} input",
                spec.padding,
                h,
                wd
            ));
        }
        let (oh, ow) = match (spec.output_len(h, kh), spec.output_len(wd, kw)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(contract!(
                    "conv2d: kernel {}x{} does not fit a {}x{} input",
                    kh,
                    kw,
                    h,
                    wd
                ))
            }
        };
        if let Some(b) = b {
            if self.value(b).len() != cout {
                return Err(contract!("conv2d: bias length mismatch"));
            }
        }
        let ty = axis_table(h, oh, kh, &spec);
        let tx = axis_table(wd, ow, kw, &spec);
        let cout_g = cout / spec.groups;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let xv = &self.nodes[x.0].value;
        let wv = self.nodes[w.0].value.data();
        for bi in 0..n {
            for oc in 0..cout {
                let g = oc / cout_g;
                let bias = b.map(|b| self.nodes[b.0].value.data()[oc]).unwrap_or(0.0);
                let out_plane = out.plane_mut(bi, oc);
                out_plane.iter_mut().for_each(|v| *v = bias);
                for icg in 0..cin_g {
                    let in_plane = xv.plane(bi, g * cin_g + icg);
                    for ky in 0..kh {
                        let ty_k = &ty[ky * oh..(ky + 1) * oh];
                        for kx in 0..kw {
                            let weight = wv[((oc * cin_g + icg) * kh + ky) * kw + kx];
                            let tx_k = &tx[kx * ow..(kx + 1) * ow];
                            for (oy, &iy) in ty_k.iter().enumerate() {
                                if iy == INVALID {
                                    continue;
                                }
                                let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                                let out_row = &mut out_plane[oy * ow..(oy + 1) * ow];
                                for (o, &ix) in out_row.iter_mut().zip(tx_k) {
                                    if ix != INVALID {
                                        *o += weight * in_row[ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            out,
            Op::Conv {
                x: x.0,
                w: w.0,
                b: b.map(|b| b.0),
                spec,
            },
        ))
    }

    /// Per-channel batch normalisation over `(batch, height, width)`.
    ///
    /// In [`Mode::Train`] batch statistics are used (for a batch of one this
    /// is per-instance normalisation) and the running statistics named by
    /// `running` receive a momentum update. In [`Mode::Eval`] the running
    /// statistics are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: (ParamId, ParamId),
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(contract!("batch_norm: affine parameters do not match {} channels", c));
        }
        let count = n * h * w;
        let xv = &self.nodes[x.0].value;
        let (mean, var) = match self.mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for bi in 0..n {
                        s += xv.plane(bi, ch).iter().sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for bi in 0..n {
                        ss += xv.plane(bi, ch).iter().map(|v| (v - m) * (v - m)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                (mean, var)
            }
            Mode::Eval => (
                self.store.get(running.0).data().to_vec(),
                self.store.get(running.1).data().to_vec(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = Tensor::zeros([n, c, h, w]);
        let hw = h * w;
        for bi in 0..n {
            for ch in 0..c {
                let start = (bi * c + ch) * hw;
                let src = xv.plane(bi, ch);
                let dst = out.plane_mut(bi, ch);
                for i in 0..hw {
                    let xh = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[start + i] = xh;
                    dst[i] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let batch_stats = self.mode == Mode::Train;
        if batch_stats {
            let rm = self.store.get(running.0);
            let rv = self.store.get(running.1);
            let unbias = if count > 1 {
                count as f64 / (count - 1) as f64
            } else {
                1.0
            };
            let new_mean: Vec<f64> = (0..c)
                .map(|ch| (1.0 - momentum) * rm.data()[ch] + momentum * mean[ch])
                .collect();
            let new_var: Vec<f64> = (0..c)
                .map(|ch| (1.0 - momentum) * rv.data()[ch] + momentum * var[ch] * unbias)
                .collect();
            let shape = rm.shape();
            self.running_updates
                .push((running.0, Tensor::from_vec(shape, new_mean)?));
            self.running_updates
                .push((running.1, Tensor::from_vec(shape, new_var)?));
        }
        Ok(self.push(
            out,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                inv_std,
                batch_stats,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(math::sigmoid);
        self.push(out, Op::Sigmoid(x.0))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(contract!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::from_vec(av.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a.0, b.0)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale(x.0, factor))
    }

    /// `x[n, c, y, x] * m[n, 0, y, x]`.
    pub fn mul_spatial(&mut self, x: Var, m: Var) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if self.shape(m) != [n, 1, h, w] {
            return Err(contract!(
                "mul_spatial: mask {:?} does not broadcast over {:?}",
                self.shape(m),
                self.shape(x)
            ));
        }
        let mut out = self.value(x).clone();
        let mv = self.value(m);
        for bi in 0..n {
            let mask = mv.plane(bi, 0);
            for ch in 0..c {
                for (o, k) in out.plane_mut(bi, ch).iter_mut().zip(mask) {
                    *o *= k;
                }
            }
        }
        Ok(self.push(out, Op::MulSpatial { x: x.0, m: m.0 }))
    }

    /// `x[n, c, y, x] * g[n, c, 0, 0]`.
    pub fn mul_channel(&mut self, x: Var, g: Var) -> Result<Var> {
        let [n, c, _, _] = self.shape(x);
        if self.shape(g) != [n, c, 1, 1] {
            return Err(contract!(
                "mul_channel: gates {:?} do not broadcast over {:?}",
                self.shape(g),
                self.shape(x)
            ));
        }
        let mut out = self.value(x).clone();
        let gv = self.value(g).data().to_vec();
        for bi in 0..n {
            for ch in 0..c {
                let k = gv[bi * c + ch];
                out.plane_mut(bi, ch).iter_mut().for_each(|o| *o *= k);
            }
        }
        Ok(self.push(out, Op::MulChannel { x: x.0, g: g.0 }))
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| contract!("concat: no inputs"))?;
        let [n, _, h, w] = self.shape(*first);
        let mut c_total = 0;
        for p in parts {
            let s = self.shape(*p);
            if s[0] != n || s[2] != h || s[3] != w {
                return Err(contract!("concat: {:?} does not align with {:?}", s, self.shape(*first)));
            }
            c_total += s[1];
        }
        let mut out = Tensor::zeros([n, c_total, h, w]);
        for bi in 0..n {
            let mut off = 0;
            for p in parts {
                let v = self.value(*p);
                for ch in 0..v.c() {
                    out.plane_mut(bi, off + ch).copy_from_slice(v.plane(bi, ch));
                }
                off += v.c();
            }
        }
        Ok(self.push(out, Op::Concat(parts.iter().map(|p| p.0).collect())))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.shape(x);
        if start + len > c || len == 0 {
            return Err(contract!("slice_channels: [{}, {}) out of {} channels", start, start + len, c));
        }
        let mut out = Tensor::zeros([n, len, h, w]);
        let v = self.value(x);
        for bi in 0..n {
            for ch in 0..len {
                out.plane_mut(bi, ch).copy_from_slice(v.plane(bi, start + ch));
            }
        }
        Ok(self.push(out, Op::Slice { x: x.0, start }))
    }

    pub fn channel_mean(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let v = self.value(x);
        let mut out = Tensor::zeros([n, 1, h, w]);
        for bi in 0..n {
            for ch in 0..c {
                for (o, s) in out.plane_mut(bi, 0).iter_mut().zip(v.plane(bi, ch)) {
                    *o += s;
                }
            }
            out.plane_mut(bi, 0).iter_mut().for_each(|o| *o /= c as f64);
        }
        self.push(out, Op::ChannelMean(x.0))
    }

    pub fn channel_max(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let v = self.value(x);
        let hw = h * w;
        let mut out = Tensor::zeros([n, 1, h, w]);
        let mut argmax = vec![0u32; n * hw];
        for bi in 0..n {
            out.plane_mut(bi, 0).copy_from_slice(v.plane(bi, 0));
            for ch in 1..c {
                let src = v.plane(bi, ch);
                let dst = out.plane_mut(bi, 0);
                for i in 0..hw {
                    if src[i] > dst[i] {
                        dst[i] = src[i];
                        argmax[bi * hw + i] = ch as u32;
                    }
                }
            }
        }
        self.push(out, Op::ChannelMax { x: x.0, argmax })
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let v = self.value(x);
        let mut out = Tensor::zeros([n, c, 1, 1]);
        for bi in 0..n {
            for ch in 0..c {
                out.set(bi, ch, 0, 0, v.plane(bi, ch).iter().sum::<f64>() / (h * w) as f64);
            }
        }
        self.push(out, Op::GlobalAvgPool(x.0))
    }

    /// Batched `scale · A Bᵀ` with `A`, `B` read as `C × (H·W)` matrices;
    /// the result is `[n, Ca, Cb, 1]`.
    pub fn gram(&mut self, a: Var, b: Var, scale: f64) -> Result<Var> {
        let [n, ca, h, w] = self.shape(a);
        let sb = self.shape(b);
        if sb[0] != n || sb[2] != h || sb[3] != w {
            return Err(contract!("gram: {:?} and {:?} do not align", self.shape(a), sb));
        }
        let cb = sb[1];
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = Tensor::zeros([n, ca, cb, 1]);
        for bi in 0..n {
            for i in 0..ca {
                let ra = av.plane(bi, i);
                for j in 0..cb {
                    let rb = bv.plane(bi, j);
                    let dot: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
                    out.set(bi, i, j, 0, scale * dot);
                }
            }
        }
        Ok(self.push(out, Op::Gram { a: a.0, b: b.0, scale }))
    }

    /// Batched `G S` with `G` of shape `[n, Co, Ci, 1]` and `S` read as a
    /// `Ci × (H·W)` matrix; the result is `[n, Co, H, W]`.
    pub fn mix_channels(&mut self, g: Var, s: Var) -> Result<Var> {
        let [n, co, ci, one] = self.shape(g);
        let [ns, cs, h, w] = self.shape(s);
        if one != 1 || ns != n || cs != ci {
            return Err(contract!(
                "mix_channels: {:?} cannot mix {:?}",
                self.shape(g),
                self.shape(s)
            ));
        }
        let gv = self.value(g);
        let sv = self.value(s);
        let mut out = Tensor::zeros([n, co, h, w]);
        for bi in 0..n {
            for i in 0..co {
                for j in 0..ci {
                    let k = gv.at(bi, i, j, 0);
                    let src = sv.plane(bi, j);
                    for (o, v) in out.plane_mut(bi, i).iter_mut().zip(src) {
                        *o += k * v;
                    }
                }
            }
        }
        Ok(self.push(out, Op::MixChannels { g: g.0, s: s.0 }))
    }

    /// Bilinear upsampling by an integer factor (half-pixel centres).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(contract!("upsample: zero factor"));
        }
        if factor == 1 {
            return Ok(x);
        }
        let [n, c, h, w] = self.shape(x);
        let ty = bilinear_taps(h, factor);
        let tx = bilinear_taps(w, factor);
        let (oh, ow) = (h * factor, w * factor);
        let v = self.value(x);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        for bi in 0..n {
            for ch in 0..c {
                let src = v.plane(bi, ch);
                let dst = out.plane_mut(bi, ch);
                for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                    for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                        dst[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                            + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
                    }
                }
            }
        }
        Ok(self.push(out, Op::Upsample { x: x.0, factor }))
    }

    /// Non-overlapping max pooling with window and stride `factor`.
    pub fn max_pool(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 1 {
            return Ok(x);
        }
        let [n, c, h, w] = self.shape(x);
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(contract!("max_pool: {}x{} is not divisible by {}", h, w, factor));
        }
        let (oh, ow) = (h / factor, w / factor);
        let v = self.value(x);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        for bi in 0..n {
            for ch in 0..c {
                let src = v.plane(bi, ch);
                let base = (bi * c + ch) * oh * ow;
                let dst = out.plane_mut(bi, ch);
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for dy in 0..factor {
                            for dx in 0..factor {
                                let i = (oy * factor + dy) * w + ox * factor + dx;
                                if src[i] > best {
                                    best = src[i];
                                    arg = i;
                                }
                            }
                        }
                        dst[oy * ow + ox] = best;
                        argmax[base + oy * ow + ox] = arg as u32;
                    }
                }
            }
        }
        Ok(self.push(out, Op::MaxPool { x: x.0, argmax }))
    }

    /// Back-propagates `seed = ∂L/∂out` through the recorded graph.
    pub fn backward(&self, out: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(out) {
            return Err(contract!(
                "backward: seed {:?} does not match output {:?}",
                seed.shape(),
                self.shape(out)
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.propagate(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv { x, w, b, spec } => self.conv_backward(*x, *w, *b, spec, gout, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let [n, c, h, w] = gout.shape();
                let hw = h * w;
                let count = (n * hw) as f64;
                let gv = self.nodes[*gamma].value.data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        let start = (bi * c + ch) * hw;
                        for (k, d) in gout.plane(bi, ch).iter().enumerate() {
                            dgamma[ch] += d * xhat[start + k];
                            dbeta[ch] += d;
                        }
                    }
                }
                let mut dx = Tensor::zeros(gout.shape());
                for bi in 0..n {
                    for ch in 0..c {
                        let start = (bi * c + ch) * hw;
                        let scale = gv[ch] * inv_std[ch];
                        let src = gout.plane(bi, ch);
                        let dst = dx.plane_mut(bi, ch);
                        for k in 0..hw {
                            dst[k] = if *batch_stats {
                                scale
                                    * (src[k] - dbeta[ch] / count - xhat[start + k] * dgamma[ch] / count)
                            } else {
                                scale * src[k]
                            };
                        }
                    }
                }
                let pshape = self.nodes[*gamma].value.shape();
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, Tensor::from_vec(pshape, dgamma).expect("shape"));
                accumulate(grads, *beta, Tensor::from_vec(pshape, dbeta).expect("shape"));
            }
            Op::Relu(x) => {
                let xv = &self.nodes[*x].value;
                let data = gout
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(gout.shape(), data).expect("shape"));
            }
            Op::Sigmoid(x) => {
                let data = gout
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(gout.shape(), data).expect("shape"));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gout.clone());
                accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gout.clone());
                accumulate(grads, *b, gout.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let da = gout.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = gout.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate(grads, *a, Tensor::from_vec(gout.shape(), da).expect("shape"));
                accumulate(grads, *b, Tensor::from_vec(gout.shape(), db).expect("shape"));
            }
            Op::Scale(x, f) => accumulate(grads, *x, gout.map(|v| v * f)),
            Op::MulSpatial { x, m } => {
                let xv = &self.nodes[*x].value;
                let mv = &self.nodes[*m].value;
                let [n, c, h, w] = xv.shape();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dm = Tensor::zeros([n, 1, h, w]);
                for bi in 0..n {
                    for ch in 0..c {
                        let g = gout.plane(bi, ch);
                        let xs = xv.plane(bi, ch);
                        let ms = mv.plane(bi, 0);
                        for (k, d) in dx.plane_mut(bi, ch).iter_mut().enumerate() {
                            *d = g[k] * ms[k];
                        }
                        for (k, d) in dm.plane_mut(bi, 0).iter_mut().enumerate() {
                            *d += g[k] * xs[k];
                        }
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *m, dm);
            }
            Op::MulChannel { x, g } => {
                let xv = &self.nodes[*x].value;
                let gv = &self.nodes[*g].value;
                let [n, c, _, _] = xv.shape();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dg = Tensor::zeros([n, c, 1, 1]);
                for bi in 0..n {
                    for ch in 0..c {
                        let k = gv.at(bi, ch, 0, 0);
                        let go = gout.plane(bi, ch);
                        let mut acc = 0.0;
                        for ((d, gi), xi) in dx.plane_mut(bi, ch).iter_mut().zip(go).zip(xv.plane(bi, ch)) {
                            *d = gi * k;
                            acc += gi * xi;
                        }
                        dg.set(bi, ch, 0, 0, acc);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *g, dg);
            }
            Op::Concat(parts) => {
                let n = gout.n();
                let mut off = 0;
                for p in parts {
                    let shape = self.nodes[*p].value.shape();
                    let mut d = Tensor::zeros(shape);
                    for bi in 0..n {
                        for ch in 0..shape[1] {
                            d.plane_mut(bi, ch).copy_from_slice(gout.plane(bi, off + ch));
                        }
                    }
                    off += shape[1];
                    accumulate(grads, *p, d);
                }
            }
            Op::Slice { x, start } => {
                let shape = self.nodes[*x].value.shape();
                let mut d = Tensor::zeros(shape);
                for bi in 0..gout.n() {
                    for ch in 0..gout.c() {
                        d.plane_mut(bi, start + ch).copy_from_slice(gout.plane(bi, ch));
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ChannelMean(x) => {
                let shape = self.nodes[*x].value.shape();
                let c = shape[1] as f64;
                let mut d = Tensor::zeros(shape);
                for bi in 0..shape[0] {
                    for ch in 0..shape[1] {
                        for (o, g) in d.plane_mut(bi, ch).iter_mut().zip(gout.plane(bi, 0)) {
                            *o = g / c;
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::ChannelMax { x, argmax } => {
                let shape = self.nodes[*x].value.shape();
                let hw = shape[2] * shape[3];
                let mut d = Tensor::zeros(shape);
                for bi in 0..shape[0] {
                    let g = gout.plane(bi, 0);
                    for k in 0..hw {
                        let ch = argmax[bi * hw + k] as usize;
                        d.plane_mut(bi, ch)[k] += g[k];
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::GlobalAvgPool(x) => {
                let shape = self.nodes[*x].value.shape();
                let hw = (shape[2] * shape[3]) as f64;
                let mut d = Tensor::zeros(shape);
                for bi in 0..shape[0] {
                    for ch in 0..shape[1] {
                        let g = gout.at(bi, ch, 0, 0) / hw;
                        d.plane_mut(bi, ch).iter_mut().for_each(|o| *o = g);
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::Gram { a, b, scale } => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (n, ca, cb) = (av.n(), av.c(), bv.c());
                let mut da = Tensor::zeros(av.shape());
                let mut db = Tensor::zeros(bv.shape());
                for bi in 0..n {
                    for i in 0..ca {
                        for j in 0..cb {
                            let g = scale * gout.at(bi, i, j, 0);
                            if g == 0.0 {
                                continue;
                            }
                            let rb = bv.plane(bi, j);
                            for (o, v) in da.plane_mut(bi, i).iter_mut().zip(rb) {
                                *o += g * v;
                            }
                            let ra = av.plane(bi, i);
                            for (o, v) in db.plane_mut(bi, j).iter_mut().zip(ra) {
                                *o += g * v;
                            }
                        }
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::MixChannels { g, s } => {
                let gv = &self.nodes[*g].value;
                let sv = &self.nodes[*s].value;
                let [n, co, ci, _] = gv.shape();
                let mut dg = Tensor::zeros(gv.shape());
                let mut ds = Tensor::zeros(sv.shape());
                for bi in 0..n {
                    for i in 0..co {
                        let go = gout.plane(bi, i);
                        for j in 0..ci {
                            let sp = sv.plane(bi, j);
                            let dot: f64 = go.iter().zip(sp).map(|(a, b)| a * b).sum();
                            dg.set(bi, i, j, 0, dot);
                            let k = gv.at(bi, i, j, 0);
                            for (o, v) in ds.plane_mut(bi, j).iter_mut().zip(go) {
                                *o += k * v;
                            }
                        }
                    }
                }
                accumulate(grads, *g, dg);
                accumulate(grads, *s, ds);
            }
            Op::Upsample { x, factor } => {
                let shape = self.nodes[*x].value.shape();
                let [n, c, h, w] = shape;
                let ty = bilinear_taps(h, *factor);
                let tx = bilinear_taps(w, *factor);
                let ow = w * factor;
                let mut d = Tensor::zeros(shape);
                for bi in 0..n {
                    for ch in 0..c {
                        let g = gout.plane(bi, ch);
                        let dst = d.plane_mut(bi, ch);
                        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                                let v = g[oy * ow + ox];
                                dst[y0 * w + x0] += v * wy0 * wx0;
                                dst[y0 * w + x1] += v * wy0 * wx1;
                                dst[y1 * w + x0] += v * wy1 * wx0;
                                dst[y1 * w + x1] += v * wy1 * wx1;
                            }
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
            Op::MaxPool { x, argmax } => {
                let shape = self.nodes[*x].value.shape();
                let mut d = Tensor::zeros(shape);
                let per = gout.h() * gout.w();
                for bi in 0..shape[0] {
                    for ch in 0..shape[1] {
                        let base = (bi * shape[1] + ch) * per;
                        let g = gout.plane(bi, ch);
                        let dst = d.plane_mut(bi, ch);
                        for k in 0..per {
                            dst[argmax[base + k] as usize] += g[k];
                        }
                    }
                }
                accumulate(grads, *x, d);
            }
        }
    }

    fn conv_backward(
        &self,
        x: usize,
        w: usize,
        b: Option<usize>,
        spec: &ConvSpec,
        gout: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let [n, _, h, wd] = xv.shape();
        let [cout, cin_g, kh, kw] = wv.shape();
        let (oh, ow) = (gout.h(), gout.w());
        let ty = axis_table(h, oh, kh, spec);
        let tx = axis_table(wd, ow, kw, spec);
        let cout_g = cout / spec.groups;
        let mut dx = Tensor::zeros(xv.shape());
        let mut dw = Tensor::zeros(wv.shape());
        let mut db = vec![0.0; cout];
        for bi in 0..n {
            for oc in 0..cout {
                let g = oc / cout_g;
                let go = gout.plane(bi, oc);
                db[oc] += go.iter().sum::<f64>();
                for icg in 0..cin_g {
                    let ic = g * cin_g + icg;
                    let in_plane = xv.plane(bi, ic);
                    for ky in 0..kh {
                        let ty_k = &ty[ky * oh..(ky + 1) * oh];
                        for kx in 0..kw {
                            let widx = ((oc * cin_g + icg) * kh + ky) * kw + kx;
                            let weight = wv.data()[widx];
                            let tx_k = &tx[kx * ow..(kx + 1) * ow];
                            let mut acc = 0.0;
                            let dx_plane = dx.plane_mut(bi, ic);
                            for (oy, &iy) in ty_k.iter().enumerate() {
                                if iy == INVALID {
                                    continue;
                                }
                                let grow = &go[oy * ow..(oy + 1) * ow];
                                let in_row = &in_plane[iy * wd..(iy + 1) * wd];
                                let dx_row = &mut dx_plane[iy * wd..(iy + 1) * wd];
                                for (&gv, &ix) in grow.iter().zip(tx_k) {
                                    if ix != INVALID {
                                        acc += gv * in_row[ix];
                                        dx_row[ix] += weight * gv;
                                    }
                                }
                            }
                            dw.data_mut()[widx] += acc;
                        }
                    }
                }
            }
        }
        accumulate(grads, x, dx);
        accumulate(grads, w, dw);
        if let Some(b) = b {
            let shape = self.nodes[b].value.shape();
            accumulate(grads, b, Tensor::from_vec(shape, db).expect("shape"));
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    /// Gradient with respect to any recorded value; `None` if it does not
    /// influence the output.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, i)| self.grads[*i].as_ref())
    }

    /// `(parameter, gradient)` for every parameter reached by the backward pass.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(p, i)| self.grads[*i].as_ref().map(|g| (*p, g)))
    }
}
