//! Small 3D convolutional network over `(phase, y, x)` with real and
//! imaginary parts as two input and output channels.
//!
//! Tensors are flat `[channel][phase][y][x]` buffers. Convolutions are
//! cross-correlations with zero "same" padding, computed by shift-and-add
//! over contiguous rows.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ArtifactRemover;
use crate::error::{Error, Result};
use crate::image::{ComplexImage, Shape};

const MAGIC: &str = "rare-weights 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn as_str(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Linear => "linear",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "linear" => Some(Activation::Linear),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Number of convolution layers.
    pub depth: usize,
    /// Hidden channel count.
    pub width: usize,
    /// Odd kernel extents along `(phase, y, x)`.
    pub kernel: [usize; 3],
    /// Output is `x + f(x)` when set, `f(x)` otherwise.
    pub residual: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            depth: 10,
            width: 64,
            kernel: [3, 3, 3],
            residual: false,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::param("depth", "must be >= 1"));
        }
        if self.width == 0 {
            return Err(Error::param("width", "must be >= 1"));
        }
        if self.kernel.iter().any(|k| k % 2 == 0) {
            return Err(Error::param("kernel", "extents must be odd"));
        }
        Ok(())
    }

    pub fn layers(&self) -> Vec<ConvLayer> {
        let k = self.kernel;
        if self.depth == 1 {
            return vec![ConvLayer::new(2, 2, k, Activation::Linear)];
        }
        let mut layers = vec![ConvLayer::new(2, self.width, k, Activation::Relu)];
        for _ in 0..self.depth - 2 {
            layers.push(ConvLayer::new(self.width, self.width, k, Activation::Relu));
        }
        layers.push(ConvLayer::new(self.width, 2, k, Activation::Linear));
        layers
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub activation: Activation,
}

impl ConvLayer {
    pub fn new(in_channels: usize, out_channels: usize, kernel: [usize; 3], activation: Activation) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            activation,
        }
    }

    fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.taps()
    }

    /// Kernel weights followed by biases.
    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }
}

/// Network weights as one flat parameter vector, layer by layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NetWeights {
    residual: bool,
    layers: Vec<ConvLayer>,
    params: Vec<f64>,
}

impl NetWeights {
    pub fn zeros(config: &NetConfig) -> Result<Self> {
        config.validate()?;
        let layers = config.layers();
        let n = layers.iter().map(ConvLayer::param_len).sum();
        Ok(Self {
            residual: config.residual,
            layers,
            params: vec![0.0; n],
        })
    }

    /// Glorot-uniform kernels and zero biases.
    pub fn glorot(config: &NetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for layer in &net.layers {
            let t = layer.taps() as f64;
            let limit = (6.0 / ((layer.in_channels + layer.out_channels) as f64 * t)).sqrt();
            for w in &mut net.params[offset..offset + layer.weight_len()] {
                *w = rng.gen_range(-limit..limit);
            }
            offset += layer.param_len();
        }
        Ok(net)
    }

    /// Weights for which the network computes the identity map.
    ///
    /// Residual networks get Glorot hidden layers and a zero output layer.
    /// Plain networks route `relu(re), relu(-re), relu(im), relu(-im)` through
    /// the centre taps, which needs `width >= 4` when `depth > 1`.
    pub fn identity(config: &NetConfig, seed: u64) -> Result<Self> {
        if config.residual {
            let mut net = Self::glorot(config, seed)?;
            let last = net.layers.len() - 1;
            let range = net.layer_range(last);
            net.params[range].iter_mut().for_each(|w| *w = 0.0);
            return Ok(net);
        }
        if config.depth > 1 && config.width < 4 {
            return Err(Error::param("width", "identity initialization needs width >= 4"));
        }
        let mut net = Self::zeros(config)?;
        let n_layers = net.layers.len();
        for l in 0..n_layers {
            let layer = net.layers[l];
            let base = net.layer_range(l).start;
            let centre = centre_tap(layer.kernel);
            let mut set = |o: usize, i: usize, v: f64| {
                net.params[base + (o * layer.in_channels + i) * layer.taps() + centre] = v;
            };
            if n_layers == 1 {
                set(0, 0, 1.0);
                set(1, 1, 1.0);
            } else if l == 0 {
                set(0, 0, 1.0);
                set(1, 0, -1.0);
                set(2, 1, 1.0);
                set(3, 1, -1.0);
            } else if l + 1 == n_layers {
                set(0, 0, 1.0);
                set(0, 1, -1.0);
                set(1, 2, 1.0);
                set(1, 3, -1.0);
            } else {
                for c in 0..4 {
                    set(c, c, 1.0);
                }
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.layers
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        let start: usize = self.layers[..l].iter().map(ConvLayer::param_len).sum();
        start..start + self.layers[l].param_len()
    }

    /// Runs the network on a two-channel tensor.
    pub fn forward_tensor(&self, input: &[f64], dims: [usize; 3]) -> Vec<f64> {
        run_layers(self, input, dims, false).2
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let fmt = |reason: String| Error::Format {
            path: path.display().to_string(),
            reason,
        };
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{MAGIC}")?;
        writeln!(out, "residual {}", self.residual)?;
        writeln!(out, "layers {}", self.layers.len())?;
        for l in &self.layers {
            writeln!(
                out,
                "layer {} {} {} {} {} {}",
                l.in_channels,
                l.out_channels,
                l.kernel[0],
                l.kernel[1],
                l.kernel[2],
                l.activation.as_str()
            )?;
        }
        writeln!(out, "end_header")?;
        for &w in &self.params {
            let v = w as f32;
            if !v.is_finite() {
                return Err(fmt("non-finite weight".into()));
            }
            out.write_all(&v.to_le_bytes())?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fmt = |reason: &str| Error::Format {
            path: path.display().to_string(),
            reason: reason.to_string(),
        };
        let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut next_line = || -> Result<String> {
            let mut s = String::new();
            if reader.read_line(&mut s)? == 0 {
                return Err(fmt("unexpected end of header"));
            }
            Ok(s.trim_end().to_string())
        };
        if next_line()? != MAGIC {
            return Err(fmt("bad magic line"));
        }
        let residual = match next_line()?.strip_prefix("residual ") {
            Some("true") => true,
            Some("false") => false,
            _ => return Err(fmt("bad residual line")),
        };
        let n_layers: usize = next_line()?
            .strip_prefix("layers ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt("bad layers line"))?;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let line = next_line()?;
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 || f[0] != "layer" {
                return Err(fmt("bad layer line"));
            }
            let num = |s: &str| s.parse::<usize>().map_err(|_| fmt("bad layer field"));
            let kernel = [num(f[3])?, num(f[4])?, num(f[5])?];
            let activation = Activation::parse(f[6]).ok_or_else(|| fmt("unknown activation"))?;
            let layer = ConvLayer::new(num(f[1])?, num(f[2])?, kernel, activation);
            if layer.in_channels == 0 || layer.out_channels == 0 || kernel.iter().any(|k| k % 2 == 0) {
                return Err(fmt("invalid layer shape"));
            }
            layers.push(layer);
        }
        if next_line()? != "end_header" {
            return Err(fmt("missing end_header"));
        }
        let chained = layers.windows(2).all(|w| w[0].out_channels == w[1].in_channels);
        if layers.is_empty() || !chained || layers[0].in_channels != 2 || layers[n_layers - 1].out_channels != 2 {
            return Err(fmt("layer channels do not chain from 2 to 2"));
        }
        let n: usize = layers.iter().map(ConvLayer::param_len).sum();
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != 4 * n {
            return Err(fmt(&format!("payload has {} bytes, expected {}", bytes.len(), 4 * n)));
        }
        let params: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(fmt("non-finite weight"));
        }
        Ok(Self {
            residual,
            layers,
            params,
        })
    }
}

impl ArtifactRemover for NetWeights {
    fn name(&self) -> String {
        format!("cnn(depth={}, params={})", self.layers.len(), self.params.len())
    }

    fn apply(&self, x: &ComplexImage) -> Result<ComplexImage> {
        let shape = x.shape();
        let out = self.forward_tensor(&image_to_tensor(x), dims_of(shape));
        let img = tensor_to_image(&out, shape);
        img.ensure_finite()?;
        Ok(img)
    }
}

fn centre_tap(k: [usize; 3]) -> usize {
    (k[0] / 2 * k[1] + k[1] / 2) * k[2] + k[2] / 2
}

pub(crate) fn dims_of(shape: Shape) -> [usize; 3] {
    [shape.phases, shape.ny, shape.nx]
}

/// `[re plane..., im plane...]`.
pub(crate) fn image_to_tensor(x: &ComplexImage) -> Vec<f64> {
    let d = x.data();
    d.iter().map(|c| c.re).chain(d.iter().map(|c| c.im)).collect()
}

pub(crate) fn tensor_to_image(t: &[f64], shape: Shape) -> ComplexImage {
    let n = shape.len();
    let data = (0..n).map(|i| Complex64::new(t[i], t[n + i])).collect();
    ComplexImage::from_parts_unchecked(shape, data)
}

/// Zero-halo layout: every channel is stored as a `[P+2h][Y+2h][X+2h]` block
/// so each kernel tap becomes one long shifted axpy over the volume.
#[derive(Clone, Copy, Debug)]
struct Padded {
    dims: [usize; 3],
    halo: [usize; 3],
    pdims: [usize; 3],
}

impl Padded {
    fn new(dims: [usize; 3], kernel: [usize; 3]) -> Self {
        let halo = [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2];
        let pdims = [dims[0] + 2 * halo[0], dims[1] + 2 * halo[1], dims[2] + 2 * halo[2]];
        Self { dims, halo, pdims }
    }

    fn len(&self) -> usize {
        self.pdims.iter().product()
    }

    fn strides(&self) -> [usize; 3] {
        [self.pdims[1] * self.pdims[2], self.pdims[2], 1]
    }

    /// Flat range from the first to one past the last interior voxel.
    fn span(&self) -> std::ops::Range<usize> {
        let s = self.strides();
        let start = self.halo[0] * s[0] + self.halo[1] * s[1] + self.halo[2];
        start..self.len() - start
    }

    fn offset(&self, tap: [usize; 3], kernel: [usize; 3]) -> isize {
        let s = self.strides();
        (0..3)
            .map(|a| (tap[a] as isize - (kernel[a] / 2) as isize) * s[a] as isize)
            .sum()
    }

    fn pad(&self, t: &[f64], channels: usize) -> Vec<f64> {
        let [np, ny, nx] = self.dims;
        let vol = np * ny * nx;
        let plen = self.len();
        let mut out = vec![0.0; channels * plen];
        for c in 0..channels {
            for p in 0..np {
                for y in 0..ny {
                    let src = c * vol + (p * ny + y) * nx;
                    let dst = c * plen + self.index(p, y, 0);
                    out[dst..dst + nx].copy_from_slice(&t[src..src + nx]);
                }
            }
        }
        out
    }

    fn unpad(&self, t: &[f64], channels: usize) -> Vec<f64> {
        let [np, ny, nx] = self.dims;
        let plen = self.len();
        let mut out = Vec::with_capacity(channels * np * ny * nx);
        for c in 0..channels {
            for p in 0..np {
                for y in 0..ny {
                    let src = c * plen + self.index(p, y, 0);
                    out.extend_from_slice(&t[src..src + nx]);
                }
            }
        }
        out
    }

    /// Flat padded index of interior voxel `(p, y, x)`.
    fn index(&self, p: usize, y: usize, x: usize) -> usize {
        ((p + self.halo[0]) * self.pdims[1] + y + self.halo[1]) * self.pdims[2] + x + self.halo[2]
    }

    /// Clears the halo cells inside `span()` of one channel.
    fn clear_halo(&self, c: &mut [f64]) {
        let [np, ny, nx] = self.dims;
        let [_, pny, pnx] = self.pdims;
        let [h0, h1, h2] = self.halo;
        for p in h0..np + h0 {
            let plane = &mut c[p * pny * pnx..(p + 1) * pny * pnx];
            plane[..h1 * pnx].fill(0.0);
            plane[(ny + h1) * pnx..].fill(0.0);
            if h2 > 0 {
                for y in h1..ny + h1 {
                    let row = &mut plane[y * pnx..(y + 1) * pnx];
                    row[..h2].fill(0.0);
                    row[nx + h2..].fill(0.0);
                }
            }
        }
    }
}

const NB: usize = 16;
const OB: usize = 4;

/// Weights regrouped as `[out block][in][tap][OB]`, zero-filled past the
/// last output channel. `w(o, i, t)` reads the source layout.
fn pack_weights(cout: usize, cin: usize, taps: usize, w: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
    let blocks = cout.div_ceil(OB);
    let mut out = vec![0.0; blocks * cin * taps * OB];
    for b in 0..blocks {
        for i in 0..cin {
            for t in 0..taps {
                for oo in 0..OB {
                    let o = b * OB + oo;
                    if o < cout {
                        out[((b * cin + i) * taps + t) * OB + oo] = w(o, i, t);
                    }
                }
            }
        }
    }
    out
}

/// `out[o][n] += sum_i sum_t w[o][i][t] inp[i][n + off[t]]` for `n` in `span`.
#[inline(always)]
fn correlate_body(out: &mut [f64], inp: &[f64], plen: usize, span: std::ops::Range<usize>, off: &[isize], packed: &[f64], cin: usize, cout: usize) {
    let taps = off.len();
    for b in 0..cout.div_ceil(OB) {
        let ob = OB.min(cout - b * OB);
        let wb = &packed[b * cin * taps * OB..(b + 1) * cin * taps * OB];
        let mut n = span.start;
        while n < span.end {
            let len = NB.min(span.end - n);
            let mut acc = [[0.0; NB]; OB];
            if len == NB {
                for i in 0..cin {
                    let inp_i = &inp[i * plen..(i + 1) * plen];
                    let wi = &wb[i * taps * OB..(i + 1) * taps * OB];
                    for (t, &d) in off.iter().enumerate() {
                        let s = (n as isize + d) as usize;
                        let x: &[f64; NB] = inp_i[s..s + NB].try_into().unwrap();
                        let w4: &[f64; OB] = wi[t * OB..t * OB + OB].try_into().unwrap();
                        for oo in 0..OB {
                            for l in 0..NB {
                                acc[oo][l] += w4[oo] * x[l];
                            }
                        }
                    }
                }
            } else {
                for i in 0..cin {
                    let inp_i = &inp[i * plen..(i + 1) * plen];
                    for (t, &d) in off.iter().enumerate() {
                        let s = (n as isize + d) as usize;
                        for oo in 0..OB {
                            let w = wb[(i * taps + t) * OB + oo];
                            for l in 0..len {
                                acc[oo][l] += w * inp_i[s + l];
                            }
                        }
                    }
                }
            }
            for (oo, a) in acc.iter().enumerate().take(ob) {
                let dst = &mut out[(b * OB + oo) * plen + n..][..len];
                for l in 0..len {
                    dst[l] += a[l];
                }
            }
            n += len;
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn correlate_avx512(out: &mut [f64], inp: &[f64], plen: usize, span: std::ops::Range<usize>, off: &[isize], packed: &[f64], cin: usize, cout: usize) {
    correlate_body(out, inp, plen, span, off, packed, cin, cout)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn correlate_avx2(out: &mut [f64], inp: &[f64], plen: usize, span: std::ops::Range<usize>, off: &[isize], packed: &[f64], cin: usize, cout: usize) {
    correlate_body(out, inp, plen, span, off, packed, cin, cout)
}

/// Same arithmetic on every path (no fused multiply-add), so results do not
/// depend on the instruction set.
fn correlate(out: &mut [f64], inp: &[f64], plen: usize, span: std::ops::Range<usize>, off: &[isize], packed: &[f64], cin: usize, cout: usize) {
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: each path runs only when its feature was detected at runtime.
        if std::is_x86_feature_detected!("avx512f") {
            unsafe { return correlate_avx512(out, inp, plen, span, off, packed, cin, cout) }
        }
        if std::is_x86_feature_detected!("avx2") {
            unsafe { return correlate_avx2(out, inp, plen, span, off, packed, cin, cout) }
        }
    }
    correlate_body(out, inp, plen, span, off, packed, cin, cout)
}

const TB: usize = 9;
const GW_BLOCK: usize = 4096;

/// `out[t] += sum_k g[k] inp[start + k + off[t]]`, with `off.len()` a
/// multiple of `TB` so a group of accumulators stays in registers.
#[inline(always)]
fn tap_dots_body(g: &[f64], inp: &[f64], start: usize, off: &[isize], out: &mut [f64]) {
    let len = g.len();
    for (b, group) in off.chunks_exact(TB).enumerate() {
        let wins: [&[f64]; TB] = std::array::from_fn(|j| {
            let s = (start as isize + group[j]) as usize;
            &inp[s..s + len]
        });
        let mut acc = [[0.0; 8]; TB];
        let (gc, gt) = (g.chunks_exact(8), g.chunks_exact(8).remainder());
        for (c, gv) in gc.enumerate() {
            let k = c * 8;
            for j in 0..TB {
                let x = &wins[j][k..k + 8];
                for l in 0..8 {
                    acc[j][l] += gv[l] * x[l];
                }
            }
        }
        let k = len - gt.len();
        for j in 0..TB {
            let tail: f64 = gt.iter().zip(&wins[j][k..]).map(|(a, x)| a * x).sum();
            if let Some(o) = out.get_mut(b * TB + j) {
                *o += acc[j].iter().sum::<f64>() + tail;
            }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn tap_dots_avx512(g: &[f64], inp: &[f64], start: usize, off: &[isize], out: &mut [f64]) {
    tap_dots_body(g, inp, start, off, out)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn tap_dots_avx2(g: &[f64], inp: &[f64], start: usize, off: &[isize], out: &mut [f64]) {
    tap_dots_body(g, inp, start, off, out)
}

fn tap_dots(g: &[f64], inp: &[f64], start: usize, off: &[isize], out: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        // SAFETY: each path runs only when its feature was detected at runtime.
        if std::is_x86_feature_detected!("avx512f") {
            unsafe { return tap_dots_avx512(g, inp, start, off, out) }
        }
        if std::is_x86_feature_detected!("avx2") {
            unsafe { return tap_dots_avx2(g, inp, start, off, out) }
        }
    }
    tap_dots_body(g, inp, start, off, out)
}

fn taps_of(kernel: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..kernel[0]).flat_map(move |a| (0..kernel[1]).flat_map(move |b| (0..kernel[2]).map(move |c| [a, b, c])))
}

/// One layer on padded tensors; the output halo is zero.
fn conv_padded(input: &[f64], g: &Padded, layer: &ConvLayer, params: &[f64]) -> Vec<f64> {
    let plen = g.len();
    let span = g.span();
    let taps = layer.taps();
    let (cin, cout) = (layer.in_channels, layer.out_channels);
    let offsets: Vec<isize> = taps_of(layer.kernel).map(|t| g.offset(t, layer.kernel)).collect();
    let (w, bias) = params.split_at(layer.weight_len());
    let packed = pack_weights(cout, cin, taps, |o, i, t| w[(o * cin + i) * taps + t]);
    let mut out = vec![0.0; cout * plen];
    for (o, out_c) in out.chunks_exact_mut(plen).enumerate() {
        out_c[span.clone()].fill(bias[o]);
    }
    correlate(&mut out, input, plen, span, &offsets, &packed, cin, cout);
    for out_c in out.chunks_exact_mut(plen) {
        g.clear_halo(out_c);
        if layer.activation == Activation::Relu {
            out_c.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    out
}

fn net_geometry(net: &NetWeights, dims: [usize; 3]) -> Padded {
    let mut k = [1, 1, 1];
    for l in &net.layers {
        for a in 0..3 {
            k[a] = k[a].max(l.kernel[a]);
        }
    }
    Padded::new(dims, k)
}

#[cfg(test)]
fn conv_forward(input: &[f64], dims: [usize; 3], layer: &ConvLayer, params: &[f64]) -> Vec<f64> {
    let g = Padded::new(dims, layer.kernel);
    let out = conv_padded(&g.pad(input, layer.in_channels), &g, layer, params);
    g.unpad(&out, layer.out_channels)
}

/// Layer inputs (padded) and final output of one forward pass.
pub(crate) struct ForwardCache {
    geometry: Padded,
    activations: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub(crate) fn output(&self) -> &[f64] {
        &self.output
    }
}

fn run_layers(net: &NetWeights, input: &[f64], dims: [usize; 3], keep: bool) -> (Padded, Vec<Vec<f64>>, Vec<f64>) {
    let g = net_geometry(net, dims);
    let padded_input = g.pad(input, 2);
    let mut kept = Vec::new();
    let mut x = padded_input;
    for (l, layer) in net.layers.iter().enumerate() {
        let p = &net.params[net.layer_range(l)];
        let next = conv_padded(&x, &g, layer, p);
        if keep {
            kept.push(std::mem::replace(&mut x, next));
        } else {
            x = next;
        }
    }
    let mut output = g.unpad(&x, 2);
    if net.residual {
        output.iter_mut().zip(input).for_each(|(o, i)| *o += i);
    }
    if keep {
        kept.push(x);
    }
    (g, kept, output)
}

pub(crate) fn forward_cached(net: &NetWeights, input: &[f64], dims: [usize; 3]) -> ForwardCache {
    let (geometry, activations, output) = run_layers(net, input, dims, true);
    ForwardCache {
        geometry,
        activations,
        output,
    }
}

/// Gradient of a scalar loss with respect to all parameters, given its
/// gradient with respect to the network output.
pub(crate) fn backward(net: &NetWeights, cache: &ForwardCache, grad_output: &[f64]) -> Vec<f64> {
    let g = &cache.geometry;
    let plen = g.len();
    let span = g.span();
    let mut grad = vec![0.0; net.params.len()];
    let mut go = g.pad(grad_output, 2);
    for l in (0..net.layers.len()).rev() {
        let layer = net.layers[l];
        let input = &cache.activations[l];
        if layer.activation == Activation::Relu {
            let post = &cache.activations[l + 1];
            go.iter_mut().zip(post).for_each(|(gv, y)| {
                if *y <= 0.0 {
                    *gv = 0.0
                }
            });
        }
        let offsets: Vec<isize> = taps_of(layer.kernel).map(|t| g.offset(t, layer.kernel)).collect();
        let range = net.layer_range(l);
        let w = &net.params[range.clone()][..layer.weight_len()];
        let (gw, gb) = grad[range].split_at_mut(layer.weight_len());
        let taps = layer.taps();
        let (cin, cout) = (layer.in_channels, layer.out_channels);
        // Padding taps read offset 0 and land past `taps`, where they are dropped.
        let mut padded = offsets.clone();
        padded.resize(taps.div_ceil(TB) * TB, 0);
        for (o, g_o) in go.chunks_exact(plen).enumerate() {
            gb[o] = g_o[span.clone()].iter().sum();
        }
        // Blocks of the span keep the shifted input windows in cache across channels.
        let mut start = span.start;
        while start < span.end {
            let end = (start + GW_BLOCK).min(span.end);
            for (o, g_o) in go.chunks_exact(plen).enumerate() {
                for (i, in_c) in input.chunks_exact(plen).enumerate() {
                    let base = (o * cin + i) * taps;
                    tap_dots(&g_o[start..end], in_c, start, &padded, &mut gw[base..base + taps]);
                }
            }
            start = end;
        }
        let mut g_in = Vec::new();
        if l > 0 {
            // Transposed correlation: negated offsets, in/out roles swapped.
            g_in = vec![0.0; cin * plen];
            let flipped: Vec<isize> = offsets.iter().map(|d| -d).collect();
            let packed = pack_weights(cin, cout, taps, |i, o, t| w[(o * cin + i) * taps + t]);
            correlate(&mut g_in, &go, plen, span.clone(), &flipped, &packed, cout, cin);
        }
        for c in g_in.chunks_exact_mut(plen) {
            g.clear_halo(c);
        }
        go = g_in;
    }
    grad
}
