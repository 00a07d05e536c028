//! Encode-process-decode GNNs and the asymmetric masked autoencoder.

mod context;
mod gnn;
mod layers;

pub use context::{coarsen, farthest_point_seeds, mean_edge_length, CoarseLevel, GraphContext};
pub use gnn::{downscale, schedule, upscale, GraphNetBlock, Gnn, GnnSpec, ProcessorKind, Stage};
pub use layers::{GatedMlp, LayerNormParams, Linear, Mlp, Part, Update, UpdateKind, LN_EPS};

use crate::diffcore::{Init, ParamId, ParamStore, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::masking::{compact_subgraph, MaskPlan};
use crate::mesh::{build_edge_features, MeshGraph};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// What the decoder receives for visible nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReinsertMode {
    /// Encoder latents.
    Latent,
    /// Encoder head predictions, re-embedded by the decoder.
    Prediction,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent: usize,
    pub expansion: usize,
    pub update: UpdateKind,
    pub encoder_depth: usize,
    pub encoder_processor: ProcessorKind,
    pub decoder_depth: usize,
    pub decoder_processor: ProcessorKind,
    pub reinsert: ReinsertMode,
    /// Zero the last layer of every update network.
    pub zero_init_updates: bool,
    /// Extra edge channel marking K-hop shortcut edges.
    pub khop_flag: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent: 128,
            expansion: 3,
            update: UpdateKind::Gated,
            encoder_depth: 15,
            encoder_processor: ProcessorKind::Wcycle,
            decoder_depth: 3,
            decoder_processor: ProcessorKind::Flat,
            reinsert: ReinsertMode::Latent,
            zero_init_updates: true,
            khop_flag: true,
        }
    }
}

impl ModelConfig {
    /// Small configuration sized for single-core CPU runs.
    pub fn desk() -> Self {
        Self {
            latent: 16,
            encoder_depth: 7,
            decoder_depth: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.expansion == 0 {
            return Err(Error::Config("latent width and expansion must be positive".into()));
        }
        if self.encoder_depth == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        schedule(self.encoder_processor, self.encoder_depth)?;
        schedule(self.decoder_processor, self.decoder_depth)?;
        Ok(())
    }
}

/// Input/output widths fixed by the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub node_in: usize,
    /// Geometric edge features (`dim + 1`).
    pub edge_in: usize,
    pub out: usize,
}

/// One masked training example prepared for the encoder.
#[derive(Debug, Clone)]
pub struct MaskedSample {
    pub plan: MaskPlan,
    pub sub: GraphContext,
    /// Row-major `[N_visible, node_in]`.
    pub visible_features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAutoencoder {
    pub config: ModelConfig,
    pub dims: ModelDims,
    pub encoder: Gnn,
    pub decoder: Gnn,
    pub mask_token: ParamId,
}

impl MaskedAutoencoder {
    pub fn new<T: Scalar, R: Rng>(
        config: ModelConfig,
        dims: ModelDims,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let (enc, dec) = Self::specs(&config, &dims);
        let encoder = Gnn::new(store, "enc", enc, rng)?;
        let decoder = Gnn::new(store, "dec", dec, rng)?;
        let mask_token = store.add_init("dec.mask_token", [1, config.latent], Init::Normal(0.02), rng);
        Ok(Self {
            config,
            dims,
            encoder,
            decoder,
            mask_token,
        })
    }

    fn specs(config: &ModelConfig, dims: &ModelDims) -> (GnnSpec, GnnSpec) {
        let edge_in = dims.edge_in + usize::from(config.khop_flag);
        let base = GnnSpec {
            node_in: dims.node_in,
            edge_in,
            out: dims.out,
            latent: config.latent,
            expansion: config.expansion,
            depth: config.encoder_depth,
            processor: config.encoder_processor,
            update: config.update,
            zero_init: config.zero_init_updates,
        };
        let dec = GnnSpec {
            node_in: match config.reinsert {
                ReinsertMode::Latent => config.latent,
                ReinsertMode::Prediction => dims.out,
            },
            depth: config.decoder_depth,
            processor: config.decoder_processor,
            ..base
        };
        (base, dec)
    }

    /// Closed-form parameter count.
    pub fn param_count(config: &ModelConfig, dims: &ModelDims) -> usize {
        let (enc, dec) = Self::specs(config, dims);
        Gnn::param_count(&enc) + Gnn::param_count(&dec) + config.latent
    }

    pub fn encoder_param_count(config: &ModelConfig, dims: &ModelDims) -> usize {
        Gnn::param_count(&Self::specs(config, dims).0)
    }

    pub fn encoder_ids<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
        store.with_prefix("enc.")
    }

    pub fn decoder_ids<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
        store.with_prefix("dec.")
    }

    pub fn edge_width(&self) -> usize {
        self.dims.edge_in + usize::from(self.config.khop_flag)
    }

    fn levels(&self) -> usize {
        self.config
            .encoder_processor
            .coarse_levels()
            .max(self.config.decoder_processor.coarse_levels())
    }

    /// Context for the whole mesh; used by the decoder and by the encoder
    /// when nothing is masked.
    pub fn full_context(&self, graph: &MeshGraph) -> Result<GraphContext> {
        let ef = build_edge_features(graph);
        GraphContext::new(graph, &ef, self.edge_width(), self.levels(), mean_edge_length(graph))
    }

    /// Compacts the visible sub-mesh. Edge lengths keep the unit of the full mesh.
    pub fn mask_sample(&self, graph: &MeshGraph, node_features: &[f32], plan: MaskPlan) -> Result<MaskedSample> {
        let w = self.dims.node_in;
        let ef = build_edge_features(graph);
        let sub = compact_subgraph(graph, &plan, node_features, w, &ef, self.config.khop_flag)?;
        let ctx = GraphContext::new(
            &sub.graph,
            &sub.edge_features,
            self.edge_width(),
            self.config.encoder_processor.coarse_levels(),
            mean_edge_length(graph),
        )?;
        Ok(MaskedSample {
            plan,
            sub: ctx,
            visible_features: sub.node_features,
        })
    }

    fn features<T: Scalar>(&self, tape: &mut Tape<'_, T>, features: &[f32]) -> Result<Var> {
        let w = self.dims.node_in;
        if features.len() % w != 0 {
            return Err(Error::shape("model", "feature length is not a multiple of node_in"));
        }
        tape.constant(
            [features.len() / w, w],
            features.iter().map(|&x| T::lit(f64::from(x))).collect(),
        )
    }

    /// Encoder on `ctx`; returns `(prediction [N, q], latent [N, p])`.
    pub fn encoder_forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        features: &[f32],
        ctx: &GraphContext,
    ) -> Result<(Var, Var)> {
        let x = self.features(tape, features)?;
        self.encoder.forward(tape, x, ctx)
    }

    /// Encoder on the visible sub-mesh, token reinsertion, decoder on the
    /// full mesh. Returns `(full prediction [N, q], encoder prediction [N_vis, q])`.
    pub fn autoencoder_forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        sample: &MaskedSample,
        full: &GraphContext,
    ) -> Result<(Var, Var)> {
        if full.n_nodes != sample.plan.n_nodes() {
            return Err(Error::shape("autoencoder", "plan does not match the full mesh"));
        }
        let (enc_out, latent) = self.encoder_forward(tape, &sample.visible_features, &sample.sub)?;
        let carried = match self.config.reinsert {
            ReinsertMode::Latent => latent,
            ReinsertMode::Prediction => enc_out,
        };
        let visible = self.decoder.encode_nodes(tape, carried)?;
        let token = tape.param(self.mask_token);
        let v = crate::masking::reinsert(tape, visible, &sample.plan, token)?;
        let v = self.decoder.process(tape, v, full)?;
        let out = self.decoder.decode(tape, v)?;
        Ok((out, enc_out))
    }
}
