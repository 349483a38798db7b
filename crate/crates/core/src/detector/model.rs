//! Toy set-prediction detector: small conv backbone, transformer encoder and
//! a decoder with learned object queries and per-layer prediction heads.
//!
//! Queries carry reference boxes that each decoder layer refines, so the box
//! head predicts offsets in logit space around the previous layer's boxes.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Canvas, Category, ImageRecord};
use crate::error::{Error, Result};
use crate::nn::{glorot, inverse_sigmoid, softmax_rows, ConvGeom, Params, Tape, Var};
use crate::prompt::fourier_features;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub num_queries: usize,
    pub num_decoder_layers: usize,
    pub num_encoder_layers: usize,
    /// Current catalog size; the background column is index `num_classes`.
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub backbone_channels: Vec<usize>,
    pub position_frequencies: usize,
    /// Initial width/height of the query reference boxes.
    pub anchor_size: f64,
    pub canvas: Canvas,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            num_queries: 24,
            num_decoder_layers: 6,
            num_encoder_layers: 1,
            num_classes: 12,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 64,
            backbone_channels: vec![8, 16],
            position_frequencies: 4,
            anchor_size: 0.2,
            canvas: Canvas::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_queries == 0 {
            return err("num_queries must be >= 1");
        }
        if self.num_decoder_layers == 0 {
            return err("num_decoder_layers must be >= 1");
        }
        if self.num_classes == 0 {
            return err("num_classes must be >= 1");
        }
        if self.heads == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return err("hidden_dim must be divisible by heads");
        }
        let stride = 1usize << (self.backbone_channels.len() + 1);
        if !self.canvas.height.is_multiple_of(stride) || !self.canvas.width.is_multiple_of(stride) {
            return err("canvas must be divisible by the backbone stride");
        }
        if self.canvas.channels != 3 {
            return err("detector expects 3-channel images");
        }
        Ok(())
    }

    fn feature_size(&self) -> (usize, usize) {
        let stride = 1usize << (self.backbone_channels.len() + 1);
        (self.canvas.height / stride, self.canvas.width / stride)
    }
}

/// Per-layer predictions: class scores (softmax over `C + 1`, background
/// last) and boxes as normalized `cx, cy, w, h`.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    /// `L x Q x (C+1)` pre-activation scores.
    pub logits: Array3<f64>,
    /// `L x Q x (C+1)`, rows sum to one.
    pub scores: Array3<f64>,
    /// `L x Q x 4`.
    pub boxes: Array3<f64>,
}

impl DetectorOutput {
    pub fn from_logits(logits: Array3<f64>, boxes: Array3<f64>) -> Self {
        let mut scores = logits.clone();
        for mut layer in scores.outer_iter_mut() {
            let sm = softmax_rows(&layer.to_owned());
            layer.assign(&sm);
        }
        Self {
            logits,
            scores,
            boxes,
        }
    }

    /// Builds an output directly from probabilities (logits become `ln p`).
    pub fn from_scores(scores: Array3<f64>, boxes: Array3<f64>) -> Self {
        let logits = scores.mapv(|p| p.max(f64::MIN_POSITIVE).ln());
        Self {
            logits,
            scores,
            boxes,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.scores.dim().0
    }

    pub fn num_queries(&self) -> usize {
        self.scores.dim().1
    }

    /// Number of foreground classes.
    pub fn num_classes(&self) -> usize {
        self.scores.dim().2 - 1
    }

    pub fn background(&self) -> usize {
        self.num_classes()
    }

    pub fn final_layer(&self) -> usize {
        self.num_layers() - 1
    }

    pub fn layer_scores(&self, l: usize) -> Array2<f64> {
        self.scores.index_axis(Axis(0), l).to_owned()
    }

    pub fn layer_boxes(&self, l: usize) -> Array2<f64> {
        self.boxes.index_axis(Axis(0), l).to_owned()
    }
}

#[derive(Clone, Debug)]
struct AttnIdx {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Debug)]
struct NormIdx {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Debug)]
struct FfnIdx {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct EncoderIdx {
    attn: AttnIdx,
    norm1: NormIdx,
    ffn: FfnIdx,
    norm2: NormIdx,
}

#[derive(Clone, Debug)]
struct DecoderIdx {
    self_attn: AttnIdx,
    norm1: NormIdx,
    cross_attn: AttnIdx,
    norm2: NormIdx,
    ffn: FfnIdx,
    norm3: NormIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    convs: Vec<(usize, usize)>,
    pos_w: usize,
    pos_b: usize,
    encoder: Vec<EncoderIdx>,
    decoder: Vec<DecoderIdx>,
    query_embed: usize,
    cls_w: usize,
    cls_b: usize,
    box_w1: usize,
    box_b1: usize,
    box_w2: usize,
    box_b2: usize,
}

/// Parameter names, shapes and initializers, in creation order.
fn build_params(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> Params {
    let d = cfg.hidden_dim;
    let mut p = Params::default();
    let mut cin = cfg.canvas.channels;
    let mut chans = cfg.backbone_channels.clone();
    chans.push(d);
    for (i, &cout) in chans.iter().enumerate() {
        p.push(format!("backbone.conv{i}.w"), glorot(rng, 9 * cin, cout));
        p.push(format!("backbone.conv{i}.b"), Array2::zeros((1, cout)));
        cin = cout;
    }
    p.push("pos_proj.w", glorot(rng, 8 * cfg.position_frequencies, d));
    p.push("pos_proj.b", Array2::zeros((1, d)));

    let attn = |p: &mut Params, rng: &mut ChaCha8Rng, prefix: &str| {
        for w in ["wq", "wk", "wv", "wo"] {
            p.push(format!("{prefix}.{w}"), glorot(rng, d, d));
        }
        p.push(format!("{prefix}.bo"), Array2::zeros((1, d)));
    };
    let norm = |p: &mut Params, prefix: &str| {
        p.push(format!("{prefix}.gain"), Array2::ones((1, d)));
        p.push(format!("{prefix}.bias"), Array2::zeros((1, d)));
    };
    let ffn = |p: &mut Params, rng: &mut ChaCha8Rng, prefix: &str| {
        p.push(format!("{prefix}.w1"), glorot(rng, d, cfg.ffn_dim));
        p.push(format!("{prefix}.b1"), Array2::zeros((1, cfg.ffn_dim)));
        p.push(format!("{prefix}.w2"), glorot(rng, cfg.ffn_dim, d));
        p.push(format!("{prefix}.b2"), Array2::zeros((1, d)));
    };
    for l in 0..cfg.num_encoder_layers {
        let pre = format!("encoder.{l}");
        attn(&mut p, rng, &format!("{pre}.attn"));
        norm(&mut p, &format!("{pre}.norm1"));
        ffn(&mut p, rng, &format!("{pre}.ffn"));
        norm(&mut p, &format!("{pre}.norm2"));
    }
    for l in 0..cfg.num_decoder_layers {
        let pre = format!("decoder.{l}");
        attn(&mut p, rng, &format!("{pre}.self_attn"));
        norm(&mut p, &format!("{pre}.norm1"));
        attn(&mut p, rng, &format!("{pre}.cross_attn"));
        norm(&mut p, &format!("{pre}.norm2"));
        ffn(&mut p, rng, &format!("{pre}.ffn"));
        norm(&mut p, &format!("{pre}.norm3"));
    }
    let qe = Array2::from_shape_fn((cfg.num_queries, d), |_| rng.gen_range(-1.0..1.0));
    p.push("query.embed", qe);
    p.push("head.cls.w", glorot(rng, d, cfg.num_classes + 1));
    p.push("head.cls.b", Array2::zeros((1, cfg.num_classes + 1)));
    p.push("head.box.w1", glorot(rng, d, d));
    p.push("head.box.b1", Array2::zeros((1, d)));
    p.push("head.box.w2", Array2::zeros((d, 4)));
    p.push("head.box.b2", Array2::zeros((1, 4)));
    p
}

fn layout(cfg: &DetectorConfig, p: &Params) -> Result<Layout> {
    let idx = |name: String| {
        p.index_of(&name)
            .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))
    };
    let attn = |pre: &str| -> Result<AttnIdx> {
        Ok(AttnIdx {
            wq: idx(format!("{pre}.wq"))?,
            wk: idx(format!("{pre}.wk"))?,
            wv: idx(format!("{pre}.wv"))?,
            wo: idx(format!("{pre}.wo"))?,
            bo: idx(format!("{pre}.bo"))?,
        })
    };
    let norm = |pre: &str| -> Result<NormIdx> {
        Ok(NormIdx {
            gain: idx(format!("{pre}.gain"))?,
            bias: idx(format!("{pre}.bias"))?,
        })
    };
    let ffn = |pre: &str| -> Result<FfnIdx> {
        Ok(FfnIdx {
            w1: idx(format!("{pre}.w1"))?,
            b1: idx(format!("{pre}.b1"))?,
            w2: idx(format!("{pre}.w2"))?,
            b2: idx(format!("{pre}.b2"))?,
        })
    };
    let convs = (0..=cfg.backbone_channels.len())
        .map(|i| {
            Ok((
                idx(format!("backbone.conv{i}.w"))?,
                idx(format!("backbone.conv{i}.b"))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let encoder = (0..cfg.num_encoder_layers)
        .map(|l| {
            let pre = format!("encoder.{l}");
            Ok(EncoderIdx {
                attn: attn(&format!("{pre}.attn"))?,
                norm1: norm(&format!("{pre}.norm1"))?,
                ffn: ffn(&format!("{pre}.ffn"))?,
                norm2: norm(&format!("{pre}.norm2"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let decoder = (0..cfg.num_decoder_layers)
        .map(|l| {
            let pre = format!("decoder.{l}");
            Ok(DecoderIdx {
                self_attn: attn(&format!("{pre}.self_attn"))?,
                norm1: norm(&format!("{pre}.norm1"))?,
                cross_attn: attn(&format!("{pre}.cross_attn"))?,
                norm2: norm(&format!("{pre}.norm2"))?,
                ffn: ffn(&format!("{pre}.ffn"))?,
                norm3: norm(&format!("{pre}.norm3"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Layout {
        convs,
        pos_w: idx("pos_proj.w".into())?,
        pos_b: idx("pos_proj.b".into())?,
        encoder,
        decoder,
        query_embed: idx("query.embed".into())?,
        cls_w: idx("head.cls.w".into())?,
        cls_b: idx("head.cls.b".into())?,
        box_w1: idx("head.box.w1".into())?,
        box_b1: idx("head.box.b1".into())?,
        box_w2: idx("head.box.w2".into())?,
        box_b2: idx("head.box.b2".into())?,
    })
}

/// Quasi-random (Halton 2,3) anchor centres, fixed for a given query count.
fn anchors(cfg: &DetectorConfig) -> Array2<f64> {
    let halton = |mut i: usize, base: usize| {
        let mut f = 1.0;
        let mut r = 0.0;
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    };
    Array2::from_shape_fn((cfg.num_queries, 4), |(q, k)| match k {
        0 => 0.1 + 0.8 * halton(q + 1, 2),
        1 => 0.1 + 0.8 * halton(q + 1, 3),
        _ => cfg.anchor_size,
    })
}

/// Handles to the differentiable outputs of one forward pass.
pub struct ForwardVars {
    pub logits: Vec<Var>,
    pub boxes: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Detector {
    config: DetectorConfig,
    params: Params,
    anchors: Array2<f64>,
    /// `tokens x 8F` Fourier features of the feature-cell boxes.
    cell_features: Array2<f64>,
    layout: Layout,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = build_params(&config, &mut rng);
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: DetectorConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let layout = layout(&config, &params)?;
        let anchors = anchors(&config);
        let (fh, fw) = config.feature_size();
        let mut cell_features = Array2::zeros((fh * fw, 8 * config.position_frequencies));
        for y in 0..fh {
            for x in 0..fw {
                let cell = [
                    (x as f64 + 0.5) / fw as f64,
                    (y as f64 + 0.5) / fh as f64,
                    1.0 / fw as f64,
                    1.0 / fh as f64,
                ];
                let f = fourier_features(&cell, config.position_frequencies);
                cell_features.row_mut(y * fw + x).assign(&ndarray::Array1::from(f));
            }
        }
        Ok(Self {
            config,
            params,
            anchors,
            cell_features,
            layout,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn check_image(&self, image: &ImageRecord) -> Result<()> {
        if image.canvas() != self.config.canvas {
            return Err(Error::Config(format!(
                "image {} has canvas {:?}, detector expects {:?}",
                image.image_id(),
                image.canvas(),
                self.config.canvas
            )));
        }
        Ok(())
    }

    /// Records a forward pass on `tape` and returns the output handles.
    pub fn forward_tape(&self, tape: &mut Tape, image: &ImageRecord) -> Result<ForwardVars> {
        self.forward_tape_with(tape, image, None)
    }

    /// Like [`Detector::forward_tape`], but decoder layer `l > 0` starts from
    /// `references[l - 1]` instead of the previous layer's boxes. Reference
    /// boxes carry no gradient either way, so with the unperturbed boxes this
    /// is the function whose parameter gradient the tape computes; finite
    /// differences against it need the references held fixed.
    pub fn forward_tape_frozen(
        &self,
        tape: &mut Tape,
        image: &ImageRecord,
        references: &[Array2<f64>],
    ) -> Result<ForwardVars> {
        if references.len() + 1 < self.config.num_decoder_layers {
            return Err(Error::Precondition(format!(
                "{} frozen references for {} decoder layers",
                references.len(),
                self.config.num_decoder_layers
            )));
        }
        self.forward_tape_with(tape, image, Some(references))
    }

    fn forward_tape_with(
        &self,
        tape: &mut Tape,
        image: &ImageRecord,
        frozen: Option<&[Array2<f64>]>,
    ) -> Result<ForwardVars> {
        self.check_image(image)?;
        let lay = &self.layout;
        let cfg = &self.config;
        let heads = cfg.heads;

        let (h, w, c) = image.pixels.dim();
        let flat = image
            .pixels
            .to_shape((h * w, c))
            .expect("contiguous pixels")
            .mapv(|v| 2.0 * v - 1.0);
        let mut x = tape.input(flat);
        let (mut fh, mut fw, mut ch) = (h, w, c);
        let n_conv = lay.convs.len();
        for (i, &(wi, bi)) in lay.convs.iter().enumerate() {
            let geom = ConvGeom {
                height: fh,
                width: fw,
                channels: ch,
                kernel: 3,
                stride: 2,
                padding: 1,
            };
            let cols = tape.im2col(x, geom);
            let (wv, bv) = (tape.param(wi), tape.param(bi));
            x = tape.linear(cols, wv, bv);
            if i + 1 < n_conv {
                x = tape.relu(x);
            }
            fh = geom.out_height();
            fw = geom.out_width();
            ch = tape.value(x).ncols();
        }

        let (pw, pb) = (tape.param(lay.pos_w), tape.param(lay.pos_b));
        let cells = tape.input(self.cell_features.clone());
        let mem_pos = tape.linear(cells, pw, pb);

        for enc in &lay.encoder {
            let qk = tape.add(x, mem_pos);
            let a = self.attend(tape, &enc.attn, qk, qk, x, heads);
            let r = tape.add(x, a);
            x = self.norm(tape, &enc.norm1, r);
            let f = self.ffn(tape, &enc.ffn, x);
            let r = tape.add(x, f);
            x = self.norm(tape, &enc.norm2, r);
        }
        let memory = x;
        let memory_keys = tape.add(memory, mem_pos);

        let (cw, cb) = (tape.param(lay.cls_w), tape.param(lay.cls_b));
        let (bw1, bb1) = (tape.param(lay.box_w1), tape.param(lay.box_b1));
        let (bw2, bb2) = (tape.param(lay.box_w2), tape.param(lay.box_b2));

        let mut tgt = tape.param(lay.query_embed);
        let mut reference = self.anchors.clone();
        let mut out = ForwardVars {
            logits: Vec::with_capacity(cfg.num_decoder_layers),
            boxes: Vec::with_capacity(cfg.num_decoder_layers),
        };
        for (l, dec) in lay.decoder.iter().enumerate() {
            let ref_feats = reference_features(&reference, cfg.position_frequencies);
            let rf = tape.input(ref_feats);
            let qpos = tape.linear(rf, pw, pb);

            let qk = tape.add(tgt, qpos);
            let a = self.attend(tape, &dec.self_attn, qk, qk, tgt, heads);
            let r = tape.add(tgt, a);
            tgt = self.norm(tape, &dec.norm1, r);

            let q = tape.add(tgt, qpos);
            let a = self.attend(tape, &dec.cross_attn, q, memory_keys, memory, heads);
            let r = tape.add(tgt, a);
            tgt = self.norm(tape, &dec.norm2, r);

            let f = self.ffn(tape, &dec.ffn, tgt);
            let r = tape.add(tgt, f);
            tgt = self.norm(tape, &dec.norm3, r);

            let logits = tape.linear(tgt, cw, cb);
            let hid = tape.linear(tgt, bw1, bb1);
            let hid = tape.relu(hid);
            let delta = tape.linear(hid, bw2, bb2);
            let base = tape.input(reference.mapv(inverse_sigmoid));
            let moved = tape.add(base, delta);
            let boxes = tape.sigmoid(moved);
            reference = match frozen {
                Some(r) if l < r.len() => r[l].clone(),
                _ => tape.value(boxes).clone(),
            };
            out.logits.push(logits);
            out.boxes.push(boxes);
        }
        Ok(out)
    }

    fn attend(&self, tape: &mut Tape, idx: &AttnIdx, q_in: Var, k_in: Var, v_in: Var, heads: usize) -> Var {
        let (wq, wk, wv) = (tape.param(idx.wq), tape.param(idx.wk), tape.param(idx.wv));
        let q = tape.matmul(q_in, wq);
        let k = tape.matmul(k_in, wk);
        let v = tape.matmul(v_in, wv);
        let a = tape.attention(q, k, v, heads);
        let (wo, bo) = (tape.param(idx.wo), tape.param(idx.bo));
        tape.linear(a, wo, bo)
    }

    fn norm(&self, tape: &mut Tape, idx: &NormIdx, x: Var) -> Var {
        let (g, b) = (tape.param(idx.gain), tape.param(idx.bias));
        tape.layer_norm(x, g, b)
    }

    fn ffn(&self, tape: &mut Tape, idx: &FfnIdx, x: Var) -> Var {
        let (w1, b1) = (tape.param(idx.w1), tape.param(idx.b1));
        let (w2, b2) = (tape.param(idx.w2), tape.param(idx.b2));
        let h = tape.linear(x, w1, b1);
        let h = tape.relu(h);
        tape.linear(h, w2, b2)
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, image: &ImageRecord) -> Result<DetectorOutput> {
        let mut tape = Tape::new(&self.params);
        let vars = self.forward_tape(&mut tape, image)?;
        Ok(collect_output(&tape, &vars))
    }

    /// Copy with the classification head widened to `new_classes`
    /// foreground classes. Old class columns are copied, the background
    /// column moves to the new last position, new columns are seeded-random.
    pub fn widen_head(&self, new_classes: usize, seed: u64) -> Result<Detector> {
        let old = self.config.num_classes;
        if new_classes < old {
            return Err(Error::Config(format!(
                "cannot shrink classifier from {old} to {new_classes} classes"
            )));
        }
        let mut config = self.config.clone();
        config.num_classes = new_classes;
        let mut params = self.params.clone();
        if new_classes > old {
            let lay = &self.layout;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7769_6465_6e00);
            let w = self.params.get(lay.cls_w);
            let b = self.params.get(lay.cls_b);
            let d = w.nrows();
            let fresh = glorot(&mut rng, d, new_classes + 1);
            let mut nw = Array2::zeros((d, new_classes + 1));
            nw.slice_mut(s![.., ..old]).assign(&w.slice(s![.., ..old]));
            nw.slice_mut(s![.., old..new_classes])
                .assign(&fresh.slice(s![.., old..new_classes]));
            nw.column_mut(new_classes).assign(&w.column(old));
            let mut nb = Array2::zeros((1, new_classes + 1));
            nb.slice_mut(s![.., ..old]).assign(&b.slice(s![.., ..old]));
            nb[[0, new_classes]] = b[[0, old]];
            params.set(lay.cls_w, nw);
            params.set(lay.cls_b, nb);
        }
        Detector::from_parts(config, params)
    }

    pub fn save(&self, path: &Path, catalog: &[Category]) -> Result<()> {
        let ckpt = Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            catalog: catalog.to_vec(),
            params: self
                .params
                .iter()
                .map(|(name, t)| StoredParam {
                    name: name.to_string(),
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().copied().collect(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt).expect("checkpoint serializes");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint and returns it with the catalog snapshot it was
    /// trained on.
    pub fn load(path: &Path) -> Result<(Detector, Vec<Category>)> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            record: path.display().to_string(),
            message: e.to_string(),
        })?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                record: path.display().to_string(),
                message: format!("unsupported checkpoint version {}", ckpt.format_version),
            });
        }
        let mut params = Params::default();
        for p in ckpt.params {
            let t = Array2::from_shape_vec((p.shape[0], p.shape[1]), p.data).map_err(|e| {
                Error::Parse {
                    record: format!("parameter {}", p.name),
                    message: e.to_string(),
                }
            })?;
            params.push(p.name, t);
        }
        if ckpt.catalog.len() != ckpt.config.num_classes {
            return Err(Error::Config(format!(
                "checkpoint catalog has {} classes, detector head has {}",
                ckpt.catalog.len(),
                ckpt.config.num_classes
            )));
        }
        Ok((Detector::from_parts(ckpt.config, params)?, ckpt.catalog))
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: DetectorConfig,
    catalog: Vec<Category>,
    params: Vec<StoredParam>,
}

#[derive(Serialize, Deserialize)]
struct StoredParam {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

fn reference_features(reference: &Array2<f64>, frequencies: usize) -> Array2<f64> {
    let mut out = Array2::zeros((reference.nrows(), 8 * frequencies));
    for (q, row) in reference.rows().into_iter().enumerate() {
        let f = fourier_features(&[row[0], row[1], row[2], row[3]], frequencies);
        out.row_mut(q).assign(&ndarray::Array1::from(f));
    }
    out
}

/// Copies the per-layer output values off a tape.
pub fn collect_output(tape: &Tape, vars: &ForwardVars) -> DetectorOutput {
    let l = vars.logits.len();
    let (q, k) = tape.value(vars.logits[0]).dim();
    let mut logits = Array3::zeros((l, q, k));
    let mut boxes = Array3::zeros((l, q, 4));
    for i in 0..l {
        logits
            .index_axis_mut(Axis(0), i)
            .assign(tape.value(vars.logits[i]));
        boxes.index_axis_mut(Axis(0), i).assign(tape.value(vars.boxes[i]));
    }
    DetectorOutput::from_logits(logits, boxes)
}
