use super::ModelError;

/// How text tokens see and are seen by the other two streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextRule {
    /// Text reads text and cond; cond and den both read text. Text never
    /// reads den, so nothing den-dependent can flow back into cond through it.
    Isolated,
    /// Text additionally reads den. Breaks cond isolation at depth ≥ 2.
    ReadsDen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub depth: usize,
    /// Pixels per token side.
    pub patch: usize,
    pub lora_rank: usize,
    /// LoRA scale is `lora_alpha / lora_rank`.
    pub lora_alpha: f32,
    /// Rank of the shared-motion deltas on cond-branch projections.
    pub motion_rank: usize,
    pub text_tokens: usize,
    pub ffn_mult: usize,
    pub frames: usize,
    pub chunk_frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub text_rule: TextRule,
    /// `false` selects the ablation: all-visible attention and LoRA on every branch.
    pub decoupled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            depth: 4,
            patch: 4,
            lora_rank: 4,
            lora_alpha: 4.0,
            motion_rank: 4,
            text_tokens: 2,
            ffn_mult: 2,
            frames: 16,
            chunk_frames: 4,
            height: 32,
            width: 32,
            channels: 3,
            text_rule: TextRule::Isolated,
            decoupled: true,
        }
    }
}

impl ModelConfig {
    /// Miniature configuration used by gradient checks and hand-computed oracles.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 8,
            heads: 2,
            depth: 1,
            patch: 2,
            lora_rank: 2,
            lora_alpha: 2.0,
            motion_rank: 2,
            text_tokens: 1,
            ffn_mult: 2,
            frames: 2,
            chunk_frames: 1,
            height: 2,
            width: 4,
            channels: 3,
            text_rule: TextRule::Isolated,
            decoupled: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        let d = self.embed_dim;
        if d == 0 || self.heads == 0 || d % self.heads != 0 {
            return bad(format!("embed_dim {} not divisible by heads {}", d, self.heads));
        }
        if self.lora_rank == 0 || self.lora_rank > d / 4 {
            return bad(format!("lora_rank {} must lie in [1, {}]", self.lora_rank, d / 4));
        }
        if self.motion_rank == 0 || self.motion_rank > d / 4 {
            return bad(format!("motion_rank {} must lie in [1, {}]", self.motion_rank, d / 4));
        }
        if !(self.lora_alpha > 0.0) {
            return bad("lora_alpha must be positive".into());
        }
        if self.patch == 0 || self.height % self.patch != 0 || self.width % self.patch != 0 {
            return bad(format!(
                "patch {} must divide {}x{}",
                self.patch, self.height, self.width
            ));
        }
        if self.depth == 0 || self.ffn_mult == 0 || self.channels == 0 {
            return bad("depth, ffn_mult and channels must be positive".into());
        }
        if self.chunk_frames == 0 || self.frames == 0 || self.frames % self.chunk_frames != 0 {
            return bad(format!(
                "chunk_frames {} must divide frames {}",
                self.chunk_frames, self.frames
            ));
        }
        Ok(())
    }

    pub fn lora_scale(&self) -> f32 {
        self.lora_alpha / self.lora_rank as f32
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    pub fn tokens_per_frame(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Values per token: `patch² · channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn chunks(&self) -> usize {
        self.frames / self.chunk_frames
    }
}
