use candle_core::DType;

use super::config::TrainConfig;
use crate::ais::AttentionHead;
use crate::backbone::{ModelState, Param, Parameterized};
use crate::error::Result;
use crate::iadm::ImageAttentionHead;
use crate::rng::{rng_for, STREAM_INIT};

/// Both towers plus the two attention heads.
#[derive(Clone)]
pub struct Model {
    pub state: ModelState,
    pub ais: AttentionHead,
    pub iadm: ImageAttentionHead,
}

impl Model {
    pub fn new(cfg: &TrainConfig, teacher_dim: usize) -> Result<Self> {
        let dtype = cfg.model.precision.dtype();
        let spec = cfg.model.encoder_spec();
        let mut rng = rng_for(cfg.run.seed, &[STREAM_INIT]);
        let state = ModelState::new(&spec, cfg.model.proj_hidden, cfg.model.proj_dim, &mut rng, dtype)?;
        let fc = spec.feature_channels();
        let ca = if cfg.ais.attn_channels == 0 { fc } else { cfg.ais.attn_channels };
        let ais = AttentionHead::new(fc, ca, teacher_dim, &mut rng, dtype)?;
        let iadm = ImageAttentionHead::new(cfg.iadm.attn_channels, &mut rng, dtype)?;
        Ok(Self { state, ais, iadm })
    }

    /// Loads the configured encoder weights into both towers, if any.
    pub fn load_pretrained(&mut self, cfg: &TrainConfig) -> Result<()> {
        if !cfg.model.pretrained.is_empty() {
            self.state.student.encoder.load_pretrained(cfg.model.pretrained.as_ref())?;
            self.state.init_momentum()?;
        }
        Ok(())
    }

    pub fn dtype(&self) -> DType {
        self.ais.projector.weight.dtype()
    }

    /// Everything the optimizer may update.
    pub fn trainable_params(&self) -> Vec<Param> {
        let mut out = self.state.student_params();
        self.ais.collect_params("ais", &mut out);
        self.iadm.collect_params("iadm", &mut out);
        out
    }

    /// Every tensor in a fixed order, buffers included.
    pub fn all_params(&self) -> Vec<Param> {
        let mut out = self.trainable_params();
        out.extend(self.state.momentum_params());
        out
    }
}
