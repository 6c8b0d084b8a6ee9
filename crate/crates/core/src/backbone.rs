//! ConvNeXt-style 3-D encoder and convolutional upsampling decoder.
//!
//! The encoder is a full-resolution stem followed by four stages. Each stage
//! halves the resolution with a stride-2 convolution and then applies one
//! depthwise block:
//!
//! ```text
//! x ─► dwconv 7³ ─► LN ─► 1×1×1 (×4) ─► GELU ─► 1×1×1 (÷4) ─► + x
//! ```
//!
//! The decoder mirrors the encoder, fusing skips at every level, and emits
//! full-resolution pixel features plus three coarse taps (stages 4, 3, 2)
//! projected to the query width.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::data::Volume;
use crate::error::{arg_err, config_err, Result};
use crate::params::{truncated_normal, Bound, ParamId, ParamStore, INIT_STD};
use crate::tensor::Tensor;

pub const NUM_STAGES: usize = 4;
const DW_KERNEL: usize = 7;
const EXPANSION: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum UpsampleMode {
    Nearest,
    #[default]
    Trilinear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub base_width: usize,
    /// Channel width `C` of pixel features, taps and queries.
    pub query_channels: usize,
    pub crop: [usize; 3],
    pub upsample: UpsampleMode,
    pub decoder_kernel: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop.iter().any(|&c| c == 0 || c % 16 != 0) {
            return Err(config_err!("crop {:?} must be a positive multiple of 16 per axis", self.crop));
        }
        if self.base_width == 0 || self.query_channels == 0 {
            return Err(config_err!("channel widths must be positive"));
        }
        if self.decoder_kernel % 2 == 0 {
            return Err(config_err!("decoder kernel must be odd, got {}", self.decoder_kernel));
        }
        Ok(())
    }

    /// Channel width of stage `i` in `1..=4`; the stem uses the base width.
    pub fn stage_width(&self, stage: usize) -> usize {
        if stage == 0 {
            self.base_width
        } else {
            self.base_width << (stage - 1)
        }
    }
}

/// Number of encoder scalars for a single-channel input and base width `w`.
pub fn encoder_param_count(base_width: usize) -> usize {
    let w = base_width;
    let stem = 27 * w + w + 2 * w;
    let mut total = stem;
    let mut prev = w;
    for i in 1..=NUM_STAGES {
        let c = w << (i - 1);
        total += 8 * c * prev + c; // downsample
        total += block_param_count(c);
        prev = c;
    }
    total
}

fn block_param_count(c: usize) -> usize {
    let e = EXPANSION * c;
    DW_KERNEL.pow(3) * c + c + 2 * c + e * c + e + c * e + c
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub dw_w: ParamId,
    pub dw_b: ParamId,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
    pub expand_w: ParamId,
    pub expand_b: ParamId,
    pub project_w: ParamId,
    pub project_b: ParamId,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct StageParams {
    pub down_w: ParamId,
    pub down_b: ParamId,
    pub block: BlockParams,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub stem_w: ParamId,
    pub stem_b: ParamId,
    pub stem_norm_g: ParamId,
    pub stem_norm_b: ParamId,
    pub stages: Vec<StageParams>,
}

#[derive(Clone, Debug)]
pub struct ConvNormParams {
    pub w: ParamId,
    pub b: ParamId,
    pub norm_g: ParamId,
    pub norm_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct LevelParams {
    pub conv1: ConvNormParams,
    pub conv2: ConvNormParams,
    pub in_channels: usize,
    pub out_channels: usize,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Levels ordered coarse to fine: fusing stage 3, 2, 1, then the stem.
    pub levels: Vec<LevelParams>,
    /// Projections of stage 4, level-3 and level-2 features to the query width.
    pub taps: Vec<(ParamId, ParamId)>,
}

/// Spread of the stem bias: `INIT_STD·√27`, the spread of the stem's response
/// to a unit input over its 27 taps.
pub const STEM_BIAS_STD: f64 = INIT_STD * 5.196_152_422_706_632;

fn conv_weight<R: Rng>(rng: &mut R, co: usize, ci: usize, k: usize) -> Tensor {
    truncated_normal(rng, &[co, ci, k, k, k], INIT_STD)
}

/// Parameters of one residual block of width `c`, registered under `name`.
pub fn block_params<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, c: usize) -> BlockParams {
    let e = EXPANSION * c;
    BlockParams {
        dw_w: store.add(format!("{name}.dw.w"), truncated_normal(rng, &[c, DW_KERNEL, DW_KERNEL, DW_KERNEL], INIT_STD)),
        dw_b: store.add(format!("{name}.dw.b"), Tensor::zeros(&[c])),
        norm_g: store.add(format!("{name}.norm.g"), Tensor::full(&[c], 1.0)),
        norm_b: store.add(format!("{name}.norm.b"), Tensor::zeros(&[c])),
        expand_w: store.add(format!("{name}.expand.w"), truncated_normal(rng, &[e, c], INIT_STD)),
        expand_b: store.add(format!("{name}.expand.b"), Tensor::zeros(&[e])),
        // residual branch starts closed
        project_w: store.add(format!("{name}.project.w"), Tensor::zeros(&[c, e])),
        project_b: store.add(format!("{name}.project.b"), Tensor::zeros(&[c])),
        channels: c,
    }
}

/// Registers stem and stage parameters in `store`.
pub fn build_encoder<R: Rng>(config: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<EncoderParams> {
    config.validate()?;
    let w = config.base_width;
    let stem_w = store.add("enc.stem.w", conv_weight(rng, w, 1, 3));
    // A zero bias would let the following channel norm cancel the input
    // scale, so flat regions of different intensity would look alike.
    let stem_b = store.add("enc.stem.b", truncated_normal(rng, &[w], STEM_BIAS_STD));
    let stem_norm_g = store.add("enc.stem.norm.g", Tensor::full(&[w], 1.0));
    let stem_norm_b = store.add("enc.stem.norm.b", Tensor::zeros(&[w]));
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for i in 1..=NUM_STAGES {
        let (cin, c) = (config.stage_width(i - 1), config.stage_width(i));
        let down_w = store.add(format!("enc.s{i}.down.w"), conv_weight(rng, c, cin, 2));
        let down_b = store.add(format!("enc.s{i}.down.b"), Tensor::zeros(&[c]));
        let block = block_params(store, rng, &format!("enc.s{i}.block"), c);
        stages.push(StageParams { down_w, down_b, block });
    }
    Ok(EncoderParams { stem_w, stem_b, stem_norm_g, stem_norm_b, stages })
}

fn conv_norm<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, ci: usize, co: usize, k: usize) -> ConvNormParams {
    ConvNormParams {
        w: store.add(format!("{name}.w"), conv_weight(rng, co, ci, k)),
        b: store.add(format!("{name}.b"), Tensor::zeros(&[co])),
        norm_g: store.add(format!("{name}.norm.g"), Tensor::full(&[co], 1.0)),
        norm_b: store.add(format!("{name}.norm.b"), Tensor::zeros(&[co])),
    }
}

pub fn build_decoder<R: Rng>(config: &BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<DecoderParams> {
    config.validate()?;
    let k = config.decoder_kernel;
    let mut levels = Vec::with_capacity(NUM_STAGES);
    let mut path = config.stage_width(NUM_STAGES);
    for level in (0..NUM_STAGES).rev() {
        let skip = config.stage_width(level);
        let out = if level == 0 { config.query_channels } else { skip };
        let name = format!("dec.l{level}");
        levels.push(LevelParams {
            conv1: conv_norm(store, rng, &format!("{name}.conv1"), path + skip, out, k),
            conv2: conv_norm(store, rng, &format!("{name}.conv2"), out, out, k),
            in_channels: path + skip,
            out_channels: out,
        });
        path = out;
    }
    let c = config.query_channels;
    let taps = [(4usize, config.stage_width(4)), (3, config.stage_width(3)), (2, config.stage_width(2))]
        .iter()
        .map(|&(stage, width)| {
            (
                store.add(format!("dec.tap{stage}.w"), truncated_normal(rng, &[c, width], INIT_STD)),
                store.add(format!("dec.tap{stage}.b"), Tensor::zeros(&[c])),
            )
        })
        .collect();
    Ok(DecoderParams { levels, taps })
}

/// Per-voxel channel mixing `(Ci, D, H, W) → (Co, D, H, W)` with a `(Co, Ci)` weight.
pub(crate) fn pointwise(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let (ci, spatial) = (shape[0], shape[1..].iter().product::<usize>());
    let co = g.shape(w)[0];
    let flat = g.reshape(x, &[ci, spatial])?;
    let y = g.matmul(w, flat)?;
    let y = g.add_channel_bias(y, b)?;
    let mut out_shape = shape;
    out_shape[0] = co;
    g.reshape(y, &out_shape)
}

/// One depthwise residual block; output shape equals input shape.
pub fn block_forward(g: &mut Graph, bound: &Bound, p: &BlockParams, x: Var) -> Result<Var> {
    let h = g.depthwise_conv3d(x, bound[p.dw_w], DW_KERNEL / 2)?;
    let h = g.add_channel_bias(h, bound[p.dw_b])?;
    let h = g.layer_norm_channels(h, bound[p.norm_g], bound[p.norm_b])?;
    let h = pointwise(g, h, bound[p.expand_w], bound[p.expand_b])?;
    let h = g.gelu(h);
    let h = pointwise(g, h, bound[p.project_w], bound[p.project_b])?;
    g.add(x, h)
}

/// Graph handles of the encoder outputs for one sample.
#[derive(Clone, Debug)]
pub struct EncoderFeatures {
    pub stem: Var,
    /// Stages 1 through 4.
    pub stages: Vec<Var>,
}

/// Graph handles of the decoder outputs for one sample.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    /// `(C, D, H, W)` at crop resolution.
    pub pixel_features: Var,
    /// `(C, ·)` taps for stages 4, 3 and 2, coarse to fine.
    pub taps: Vec<Var>,
}

/// Encoder plus decoder parameters.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl Backbone {
    pub fn build<R: Rng>(config: BackboneConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        let encoder = build_encoder(&config, store, rng)?;
        let decoder = build_decoder(&config, store, rng)?;
        Ok(Self { config, encoder, decoder })
    }

    /// Runs the encoder on a `(1, D, H, W)` input node.
    pub fn encode_graph(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<EncoderFeatures> {
        let dims = &g.shape(x)[1..];
        if g.shape(x).len() != 4 || dims.iter().any(|&d| d == 0 || d % 16 != 0) {
            return Err(arg_err!("encoder input must be (1, D, H, W) with sides divisible by 16, got {:?}", g.shape(x)));
        }
        let e = &self.encoder;
        let h = g.conv3d(x, bound[e.stem_w], 1, 1)?;
        let h = g.add_channel_bias(h, bound[e.stem_b])?;
        let stem = g.layer_norm_channels(h, bound[e.stem_norm_g], bound[e.stem_norm_b])?;
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut h = stem;
        for s in &e.stages {
            let d = g.conv3d(h, bound[s.down_w], 2, 0)?;
            let d = g.add_channel_bias(d, bound[s.down_b])?;
            h = block_forward(g, bound, &s.block, d)?;
            stages.push(h);
        }
        Ok(EncoderFeatures { stem, stages })
    }

    fn upsample(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let linear = self.config.upsample == UpsampleMode::Trilinear;
        let mut h = x;
        for axis in 1..4 {
            h = g.upsample_axis(h, axis, linear)?;
        }
        Ok(h)
    }

    fn conv_norm_act(&self, g: &mut Graph, bound: &Bound, p: &ConvNormParams, x: Var) -> Result<Var> {
        let k = self.config.decoder_kernel;
        let h = g.conv3d(x, bound[p.w], 1, k / 2)?;
        let h = g.add_channel_bias(h, bound[p.b])?;
        let h = g.layer_norm_channels(h, bound[p.norm_g], bound[p.norm_b])?;
        Ok(g.gelu(h))
    }

    /// Runs the decoder on encoder features.
    pub fn decode_graph(&self, g: &mut Graph, bound: &Bound, enc: &EncoderFeatures) -> Result<BackboneOutput> {
        if enc.stages.len() != NUM_STAGES {
            return Err(arg_err!("decoder needs {NUM_STAGES} stage features, got {}", enc.stages.len()));
        }
        let skips = [enc.stages[2], enc.stages[1], enc.stages[0], enc.stem];
        let mut path = enc.stages[3];
        let mut fused = Vec::with_capacity(NUM_STAGES);
        for (level, skip) in self.decoder.levels.iter().zip(skips) {
            let up = self.upsample(g, path)?;
            let channels = g.shape(up)[0] + g.shape(skip)[0];
            if channels != level.in_channels {
                return Err(config_err!(
                    "decoder level expects {} channels after the skip, got {channels}",
                    level.in_channels
                ));
            }
            let cat = g.concat(up, skip)?;
            let h = self.conv_norm_act(g, bound, &level.conv1, cat)?;
            path = self.conv_norm_act(g, bound, &level.conv2, h)?;
            fused.push(path);
        }
        let sources = [enc.stages[3], fused[0], fused[1]];
        let mut taps = Vec::with_capacity(3);
        for (src, &(w, b)) in sources.into_iter().zip(&self.decoder.taps) {
            if g.shape(src)[0] != g.shape(bound[w])[1] {
                return Err(config_err!("tap projection expects {} channels", g.shape(bound[w])[1]));
            }
            taps.push(pointwise(g, src, bound[w], bound[b])?);
        }
        Ok(BackboneOutput { pixel_features: path, taps })
    }

    pub fn forward_graph(&self, g: &mut Graph, bound: &Bound, x: Var) -> Result<BackboneOutput> {
        let enc = self.encode_graph(g, bound, x)?;
        self.decode_graph(g, bound, &enc)
    }
}

/// Channels-first feature volume tagged with its stage (0 = stem).
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub data: Tensor,
    pub stage: usize,
}

impl FeatureMap {
    pub fn spatial_dims(&self) -> [usize; 3] {
        let s = self.data.shape();
        [s[1], s[2], s[3]]
    }
}

/// Value-level encoder output of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub stem: FeatureMap,
    pub stages: Vec<FeatureMap>,
}

/// Value-level decoder output of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneFeatures {
    pub pixel_features: FeatureMap,
    pub taps: Vec<FeatureMap>,
}

pub fn volume_tensor(v: &Volume) -> Tensor {
    let [d, h, w] = v.dims();
    Tensor::from_parts(vec![1, d, h, w], v.voxels().iter().map(|&x| x as f64).collect())
}

/// Encodes every crop of a uniformly shaped batch.
pub fn encode(backbone: &Backbone, store: &ParamStore, batch: &[Volume]) -> Result<Vec<EncodedSample>> {
    let Some(first) = batch.first() else {
        return Ok(Vec::new());
    };
    if batch.iter().any(|v| v.dims() != first.dims()) {
        return Err(arg_err!("batch crops must share one shape"));
    }
    batch
        .iter()
        .map(|v| {
            let mut g = Graph::new();
            let bound = store.bind(&mut g, false);
            let x = g.constant(volume_tensor(v));
            let enc = backbone.encode_graph(&mut g, &bound, x)?;
            Ok(EncodedSample {
                stem: FeatureMap { data: g.value(enc.stem).clone(), stage: 0 },
                stages: enc
                    .stages
                    .iter()
                    .enumerate()
                    .map(|(i, s)| FeatureMap { data: g.value(*s).clone(), stage: i + 1 })
                    .collect(),
            })
        })
        .collect()
}

/// Decodes value-level encoder features into pixel features and taps.
pub fn decode_pixels(backbone: &Backbone, store: &ParamStore, sample: &EncodedSample) -> Result<BackboneFeatures> {
    if sample.stages.len() != NUM_STAGES {
        return Err(arg_err!("decoder needs {NUM_STAGES} stage features, got {}", sample.stages.len()));
    }
    let mut g = Graph::new();
    let bound = store.bind(&mut g, false);
    let enc = EncoderFeatures {
        stem: g.constant(sample.stem.data.clone()),
        stages: sample.stages.iter().map(|s| g.constant(s.data.clone())).collect(),
    };
    let out = backbone.decode_graph(&mut g, &bound, &enc)?;
    Ok(BackboneFeatures {
        pixel_features: FeatureMap { data: g.value(out.pixel_features).clone(), stage: 0 },
        taps: out
            .taps
            .iter()
            .zip([4, 3, 2])
            .map(|(t, stage)| FeatureMap { data: g.value(*t).clone(), stage })
            .collect(),
    })
}
