//! Compact classifier architectures with hand-written forward/backward
//! passes in f64, so gradients can be checked against finite differences.

use crate::datastore::ImageTensor;
use crate::error::{Error, Result};
use crate::seed;
use rand::Rng;
use std::path::Path;

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Mlp { hidden: Vec<usize> },
    SmallConv,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// (height, width, channels)
    pub input: (usize, usize, usize),
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Layer {
    Dense {
        // row-major out_dim x in_dim
        w: Vec<f64>,
        b: Vec<f64>,
        in_dim: usize,
        out_dim: usize,
        relu: bool,
    },
    // 3x3 convolution, zero padding 1 (same shape), ReLU fused
    Conv3x3 {
        // out_c x in_c x 3 x 3
        w: Vec<f64>,
        b: Vec<f64>,
        in_c: usize,
        out_c: usize,
        h: usize,
        wd: usize,
    },
    // 2x2 max pool, stride 2, floor on odd dims
    MaxPool2 {
        channels: usize,
        in_h: usize,
        in_w: usize,
    },
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub(crate) layers: Vec<Layer>,
    pub log: Vec<EpochStats>,
    /// Post-clip gradient norms, recorded each step when DP-SGD is active.
    pub dp_post_clip_norms: Vec<f64>,
}

pub(crate) struct GradBuf {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

pub(crate) struct ForwardTrace {
    /// acts[0] is the input; acts[i+1] is the output of layer i.
    pub acts: Vec<Vec<f64>>,
}

impl Model {
    pub fn init(spec: &ModelSpec, master_seed: u64) -> Result<Self> {
        let (h, w, c) = spec.input;
        let d = h * w * c;
        if d == 0 || spec.classes == 0 {
            return Err(Error::InvalidParameter("empty input shape or class count".into()));
        }
        let mut layers = Vec::new();
        match &spec.arch {
            Architecture::Mlp { hidden } => {
                let mut in_dim = d;
                for (i, &hdim) in hidden.iter().enumerate() {
                    layers.push(dense_init(in_dim, hdim, true, master_seed, i as u64));
                    in_dim = hdim;
                }
                layers.push(dense_init(
                    in_dim,
                    spec.classes,
                    false,
                    master_seed,
                    hidden.len() as u64,
                ));
            }
            Architecture::SmallConv => {
                layers.push(conv_init(c, 16, h, w, master_seed, 0));
                layers.push(Layer::MaxPool2 { channels: 16, in_h: h, in_w: w });
                let (h2, w2) = (h / 2, w / 2);
                if h2 == 0 || w2 == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "input {h}x{w} too small for SmallConv"
                    )));
                }
                layers.push(conv_init(16, 32, h2, w2, master_seed, 1));
                layers.push(Layer::MaxPool2 { channels: 32, in_h: h2, in_w: w2 });
                let (h3, w3) = (h2 / 2, w2 / 2);
                if h3 == 0 || w3 == 0 {
                    return Err(Error::ShapeMismatch(format!(
                        "input {h}x{w} too small for SmallConv"
                    )));
                }
                layers.push(dense_init(32 * h3 * w3, spec.classes, false, master_seed, 2));
            }
        }
        Ok(Model {
            spec: spec.clone(),
            layers,
            log: Vec::new(),
            dp_post_clip_norms: Vec::new(),
        })
    }

    pub(crate) fn forward_trace(&self, input: &[f64]) -> ForwardTrace {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(input.to_vec());
        for layer in &self.layers {
            let next = layer_forward(layer, acts.last().unwrap());
            acts.push(next);
        }
        ForwardTrace { acts }
    }

    pub fn logits(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        self.check_shape(img)?;
        Ok(self.forward_trace(&img.pixels).acts.pop().unwrap())
    }

    /// Penultimate-layer features: the input to the final dense layer.
    pub fn features(&self, img: &ImageTensor) -> Result<Vec<f64>> {
        self.check_shape(img)?;
        let mut trace = self.forward_trace(&img.pixels);
        trace.acts.pop();
        Ok(trace.acts.pop().unwrap())
    }

    fn check_shape(&self, img: &ImageTensor) -> Result<()> {
        if img.shape() != self.spec.input {
            return Err(Error::ShapeMismatch(format!(
                "model expects {:?}, got {:?}",
                self.spec.input,
                img.shape()
            )));
        }
        Ok(())
    }

    /// Backprop from a gradient at the output of layer `upto` (exclusive end
    /// of the layer stack when `upto == layers.len()`). Returns parameter
    /// gradients for the traversed layers and the gradient at the input.
    pub(crate) fn backward_from(
        &self,
        trace: &ForwardTrace,
        upto: usize,
        d_out: Vec<f64>,
        grads: Option<&mut [GradBuf]>,
    ) -> Vec<f64> {
        let mut d = d_out;
        let mut grads = grads;
        for i in (0..upto).rev() {
            let input = &trace.acts[i];
            let output = &trace.acts[i + 1];
            let gref = grads.as_deref_mut().map(|g| &mut g[i]);
            d = layer_backward(&self.layers[i], input, output, &d, gref);
        }
        d
    }

    pub(crate) fn zero_grads(&self) -> Vec<GradBuf> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { w, b, .. } | Layer::Conv3x3 { w, b, .. } => GradBuf {
                    w: vec![0.0; w.len()],
                    b: vec![0.0; b.len()],
                },
                Layer::MaxPool2 { .. } => GradBuf { w: Vec::new(), b: Vec::new() },
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Dense { w, b, .. } | Layer::Conv3x3 { w, b, .. } => w.len() + b.len(),
                Layer::MaxPool2 { .. } => 0,
            })
            .sum()
    }

    pub(crate) fn params_mut(&mut self) -> Vec<&mut f64> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Dense { w, b, .. } | Layer::Conv3x3 { w, b, .. } => {
                    out.extend(w.iter_mut());
                    out.extend(b.iter_mut());
                }
                Layer::MaxPool2 { .. } => {}
            }
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Dense { w, b, .. } | Layer::Conv3x3 { w, b, .. } => {
                w.iter().chain(b.iter()).all(|v| v.is_finite())
            }
            Layer::MaxPool2 { .. } => true,
        })
    }
}

fn dense_init(in_dim: usize, out_dim: usize, relu: bool, master_seed: u64, idx: u64) -> Layer {
    let mut rng = seed::rng(master_seed, "init.layer", idx);
    let s = (6.0 / (in_dim + out_dim) as f64).sqrt();
    Layer::Dense {
        w: (0..in_dim * out_dim).map(|_| rng.gen_range(-s..s)).collect(),
        b: vec![0.0; out_dim],
        in_dim,
        out_dim,
        relu,
    }
}

fn conv_init(in_c: usize, out_c: usize, h: usize, wd: usize, master_seed: u64, idx: u64) -> Layer {
    let mut rng = seed::rng(master_seed, "init.layer", idx);
    let fan_in = in_c * 9;
    let fan_out = out_c * 9;
    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Layer::Conv3x3 {
        w: (0..out_c * in_c * 9).map(|_| rng.gen_range(-s..s)).collect(),
        b: vec![0.0; out_c],
        in_c,
        out_c,
        h,
        wd,
    }
}

fn layer_forward(layer: &Layer, input: &[f64]) -> Vec<f64> {
    match layer {
        Layer::Dense { w, b, in_dim, out_dim, relu } => {
            let mut out = vec![0.0; *out_dim];
            for o in 0..*out_dim {
                let row = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for (x, wv) in input.iter().zip(row) {
                    acc += x * wv;
                }
                // f64::max would swallow a NaN here; propagate it so
                // divergence surfaces as a non-finite loss.
                out[o] = if *relu && acc <= 0.0 { 0.0 } else { acc };
            }
            out
        }
        Layer::Conv3x3 { w, b, in_c, out_c, h, wd } => {
            let (h, wd) = (*h, *wd);
            let mut out = vec![0.0; out_c * h * wd];
            for oc in 0..*out_c {
                for r in 0..h {
                    for c in 0..wd {
                        let mut acc = b[oc];
                        for ic in 0..*in_c {
                            for dr in 0..3usize {
                                let rr = r as isize + dr as isize - 1;
                                if rr < 0 || rr >= h as isize {
                                    continue;
                                }
                                for dc in 0..3usize {
                                    let cc = c as isize + dc as isize - 1;
                                    if cc < 0 || cc >= wd as isize {
                                        continue;
                                    }
                                    let wv = w[((oc * in_c + ic) * 3 + dr) * 3 + dc];
                                    let xv = input[(ic * h + rr as usize) * wd + cc as usize];
                                    acc += wv * xv;
                                }
                            }
                        }
                        out[(oc * h + r) * wd + c] = if acc <= 0.0 { 0.0 } else { acc };
                    }
                }
            }
            out
        }
        Layer::MaxPool2 { channels, in_h, in_w } => {
            let (oh, ow) = (in_h / 2, in_w / 2);
            let mut out = vec![0.0; channels * oh * ow];
            for ch in 0..*channels {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut best = f64::NEG_INFINITY;
                        for dr in 0..2 {
                            for dc in 0..2 {
                                let v = input[(ch * in_h + 2 * r + dr) * in_w + 2 * c + dc];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        out[(ch * oh + r) * ow + c] = best;
                    }
                }
            }
            out
        }
    }
}

fn layer_backward(
    layer: &Layer,
    input: &[f64],
    output: &[f64],
    d_out: &[f64],
    grads: Option<&mut GradBuf>,
) -> Vec<f64> {
    match layer {
        Layer::Dense { w, in_dim, out_dim, relu, .. } => {
            let mut d_in = vec![0.0; *in_dim];
            let mut local = vec![0.0; *out_dim];
            for o in 0..*out_dim {
                local[o] = if *relu && output[o] <= 0.0 { 0.0 } else { d_out[o] };
            }
            if let Some(g) = grads {
                for o in 0..*out_dim {
                    if local[o] != 0.0 {
                        let row = &mut g.w[o * in_dim..(o + 1) * in_dim];
                        for (gw, &x) in row.iter_mut().zip(input) {
                            *gw += local[o] * x;
                        }
                        g.b[o] += local[o];
                    }
                }
            }
            for o in 0..*out_dim {
                if local[o] != 0.0 {
                    let row = &w[o * in_dim..(o + 1) * in_dim];
                    for (di, &wv) in d_in.iter_mut().zip(row) {
                        *di += local[o] * wv;
                    }
                }
            }
            d_in
        }
        Layer::Conv3x3 { w, in_c, out_c, h, wd, .. } => {
            let (h, wd) = (*h, *wd);
            let mut d_in = vec![0.0; in_c * h * wd];
            let mut g = grads;
            for oc in 0..*out_c {
                for r in 0..h {
                    for c in 0..wd {
                        let oi = (oc * h + r) * wd + c;
                        // ReLU was fused in the forward pass
                        if output[oi] <= 0.0 || d_out[oi] == 0.0 {
                            continue;
                        }
                        let d = d_out[oi];
                        if let Some(gb) = g.as_deref_mut() {
                            gb.b[oc] += d;
                        }
                        for ic in 0..*in_c {
                            for dr in 0..3usize {
                                let rr = r as isize + dr as isize - 1;
                                if rr < 0 || rr >= h as isize {
                                    continue;
                                }
                                for dc in 0..3usize {
                                    let cc = c as isize + dc as isize - 1;
                                    if cc < 0 || cc >= wd as isize {
                                        continue;
                                    }
                                    let wi = ((oc * in_c + ic) * 3 + dr) * 3 + dc;
                                    let xi = (ic * h + rr as usize) * wd + cc as usize;
                                    if let Some(gb) = g.as_deref_mut() {
                                        gb.w[wi] += d * input[xi];
                                    }
                                    d_in[xi] += d * w[wi];
                                }
                            }
                        }
                    }
                }
            }
            d_in
        }
        Layer::MaxPool2 { channels, in_h, in_w } => {
            let (oh, ow) = (in_h / 2, in_w / 2);
            let mut d_in = vec![0.0; channels * in_h * in_w];
            for ch in 0..*channels {
                for r in 0..oh {
                    for c in 0..ow {
                        // route to the first-scanned argmax, matching forward
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0;
                        for dr in 0..2 {
                            for dc in 0..2 {
                                let idx = (ch * in_h + 2 * r + dr) * in_w + 2 * c + dc;
                                if input[idx] > best {
                                    best = input[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        d_in[best_idx] += d_out[(ch * oh + r) * ow + c];
                    }
                }
            }
            d_in
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DPMXMD01";

/// Versioned checkpoint: architecture echo plus 32-bit parameters.
pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    match &model.spec.arch {
        Architecture::Mlp { hidden } => {
            buf.push(0);
            buf.extend_from_slice(&(hidden.len() as u32).to_le_bytes());
            for &h in hidden {
                buf.extend_from_slice(&(h as u32).to_le_bytes());
            }
        }
        Architecture::SmallConv => {
            buf.push(1);
            buf.extend_from_slice(&0u32.to_le_bytes());
        }
    }
    let (h, w, c) = model.spec.input;
    for v in [h, w, c, model.spec.classes] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let mut flat: Vec<f64> = Vec::new();
    for l in &model.layers {
        match l {
            Layer::Dense { w, b, .. } | Layer::Conv3x3 { w, b, .. } => {
                flat.extend(w.iter().chain(b.iter()));
            }
            Layer::MaxPool2 { .. } => {}
        }
    }
    buf.extend_from_slice(&(flat.len() as u32).to_le_bytes());
    for v in flat {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let origin = path.display().to_string();
    let err = |detail: &str| Error::Truncated {
        path: origin.clone(),
        detail: detail.to_string(),
    };
    if buf.len() < 8 || &buf[..8] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: origin.clone(),
            expected: u32::from_le_bytes(CHECKPOINT_MAGIC[..4].try_into().unwrap()),
            found: 0,
        });
    }
    let mut pos = 8;
    let take_u32 = |buf: &[u8], pos: &mut usize| -> Result<u32> {
        let b = buf
            .get(*pos..*pos + 4)
            .ok_or_else(|| Error::Truncated {
                path: path.display().to_string(),
                detail: "checkpoint header".into(),
            })?;
        *pos += 4;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    };
    let arch_tag = buf[pos];
    pos += 1;
    let hidden_len = take_u32(&buf, &mut pos)? as usize;
    let mut hidden = Vec::with_capacity(hidden_len);
    for _ in 0..hidden_len {
        hidden.push(take_u32(&buf, &mut pos)? as usize);
    }
    let arch = match arch_tag {
        0 => Architecture::Mlp { hidden },
        1 => Architecture::SmallConv,
        _ => return Err(err("unknown architecture tag")),
    };
    let h = take_u32(&buf, &mut pos)? as usize;
    let w = take_u32(&buf, &mut pos)? as usize;
    let c = take_u32(&buf, &mut pos)? as usize;
    let classes = take_u32(&buf, &mut pos)? as usize;
    let spec = ModelSpec { arch, input: (h, w, c), classes };
    let mut model = Model::init(&spec, 0)?;
    let flat_len = take_u32(&buf, &mut pos)? as usize;
    if flat_len != model.param_count() {
        return Err(err("parameter count mismatch"));
    }
    let mut vals = Vec::with_capacity(flat_len);
    for _ in 0..flat_len {
        let b = buf
            .get(pos..pos + 4)
            .ok_or_else(|| Error::Truncated {
                path: origin.clone(),
                detail: "checkpoint parameters".into(),
            })?;
        pos += 4;
        vals.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
    }
    for (p, v) in model.params_mut().into_iter().zip(vals) {
        *p = v;
    }
    model.log.clear();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_chain_for_both_architectures() {
        let mlp = ModelSpec {
            arch: Architecture::Mlp { hidden: vec![16, 8] },
            input: (4, 4, 1),
            classes: 3,
        };
        let m = Model::init(&mlp, 1).unwrap();
        let img = ImageTensor::new(4, 4, 1, vec![0.5; 16]);
        assert_eq!(m.logits(&img).unwrap().len(), 3);
        assert_eq!(m.features(&img).unwrap().len(), 8);

        let conv = ModelSpec {
            arch: Architecture::SmallConv,
            input: (8, 8, 1),
            classes: 3,
        };
        let m = Model::init(&conv, 1).unwrap();
        let img = ImageTensor::new(8, 8, 1, vec![0.5; 64]);
        assert_eq!(m.logits(&img).unwrap().len(), 3);
        assert_eq!(m.features(&img).unwrap().len(), 32 * 2 * 2);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let spec = ModelSpec {
            arch: Architecture::Mlp { hidden: vec![4] },
            input: (2, 2, 1),
            classes: 2,
        };
        let m = Model::init(&spec, 0).unwrap();
        let img = ImageTensor::new(3, 3, 1, vec![0.0; 9]);
        assert!(m.logits(&img).is_err());
    }

    #[test]
    fn checkpoint_round_trip_preserves_f32_params() {
        let spec = ModelSpec {
            arch: Architecture::SmallConv,
            input: (8, 8, 1),
            classes: 3,
        };
        let m = Model::init(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.bin");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back.spec, m.spec);
        assert_eq!(back.param_count(), m.param_count());
        let img = ImageTensor::new(8, 8, 1, vec![0.3; 64]);
        let a = m.logits(&img).unwrap();
        let b = back.logits(&img).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
