//! Backbone, query decoder and classification head wired into one network.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::backbone::{volume_tensor, Backbone, BackboneConfig, UpsampleMode};
use crate::data::Volume;
use crate::error::{config_err, Result};
use crate::kmax::{flatten_pixels, ClusterAssignment, KmaxConfig, KmaxDecoder};
use crate::params::{Bound, ParamStore};
use crate::postprocess::{ClassifierParams, Segmentation};

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub base_width: usize,
    /// Width `C` of pixel features and queries.
    pub channels: usize,
    /// Number of queries `N`.
    pub num_queries: usize,
    pub num_classes: usize,
    pub crop: [usize; 3],
    pub rounds_per_tap: usize,
    pub share_mlp: bool,
    pub upsample: UpsampleMode,
    pub decoder_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            base_width: 4,
            channels: 8,
            num_queries: 8,
            num_classes: 3,
            crop: [32; 3],
            rounds_per_tap: 1,
            share_mlp: true,
            upsample: UpsampleMode::Trilinear,
            decoder_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            base_width: self.base_width,
            query_channels: self.channels,
            crop: self.crop,
            upsample: self.upsample,
            decoder_kernel: self.decoder_kernel,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone().validate()?;
        if !(2..=255).contains(&self.num_classes) {
            return Err(config_err!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if self.num_queries == 0 || self.rounds_per_tap == 0 {
            return Err(config_err!("num_queries and rounds_per_tap must be positive"));
        }
        Ok(())
    }
}

/// Graph outputs for one view of one sample.
#[derive(Clone, Debug)]
pub struct ViewOutput {
    /// `HWD × K` segmentation probabilities.
    pub segmentation: Var,
    /// `HWD × N` mask prediction.
    pub mask: Var,
    /// `N × K` query distribution logits.
    pub logits: Var,
    /// Segmentations from the query state after each earlier block.
    pub aux_segmentations: Vec<Var>,
    pub assignments: Vec<ClusterAssignment>,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub kmax: KmaxDecoder,
    pub classifier: ClassifierParams,
}

impl Model {
    /// Builds the network and its freshly initialized parameters.
    pub fn build(config: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(config.backbone(), &mut store, &mut rng)?;
        let kmax = KmaxDecoder::build(
            KmaxConfig {
                num_queries: config.num_queries,
                channels: config.channels,
                rounds_per_tap: config.rounds_per_tap,
                share_mlp: config.share_mlp,
            },
            &mut store,
            &mut rng,
        )?;
        let classifier = ClassifierParams::build(&mut store, &mut rng, config.channels, config.num_classes);
        Ok((Self { config, backbone, kmax, classifier }, store))
    }

    /// Forward pass on a `(1, D, H, W)` input node.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        input: Var,
        frozen: Option<&[ClusterAssignment]>,
        aux: bool,
    ) -> Result<ViewOutput> {
        let features = self.backbone.forward_graph(g, bound, input)?;
        let stack = self.kmax.run_graph(g, bound, bound[self.kmax.queries], &features.taps, frozen)?;
        let pixels = flatten_pixels(g, features.pixel_features)?;
        let head = self.classifier.head_graph(g, bound, pixels, stack.queries)?;
        let mut aux_segmentations = Vec::new();
        if aux {
            for &q in &stack.snapshots[..stack.snapshots.len() - 1] {
                aux_segmentations.push(self.classifier.head_graph(g, bound, pixels, q)?.segmentation);
            }
        }
        Ok(ViewOutput {
            segmentation: head.segmentation,
            mask: head.mask,
            logits: head.logits,
            aux_segmentations,
            assignments: stack.assignments,
        })
    }

    /// Segmentation of one crop-sized volume.
    pub fn predict(&self, store: &ParamStore, volume: &Volume) -> Result<Segmentation> {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, false);
        let x = g.constant(volume_tensor(volume));
        let out = self.forward_graph(&mut g, &bound, x, None, false)?;
        Ok(Segmentation { probs: g.value(out.segmentation).clone(), origin_shape: volume.dims() })
    }
}
