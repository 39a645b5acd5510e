//! Flat `key = value` run configuration with dotted keys and `#` comments.

use std::path::Path;

use sha2::{Digest, Sha256};
use tape_core::model::TextRule;
use tape_core::pipeline::PipelineConfig;
use tape_core::training::SharedScope;

use crate::CliError;

/// Keys whose values are paths; they do not enter the config digest.
const PATH_KEYS: [&str; 1] = ["paths.runs"];

macro_rules! fields {
    ($($key:literal => $($path:ident).+;)*) => {
        const FIELD_KEYS: &[&str] = &[$($key),*];

        fn get_field(pc: &PipelineConfig, key: &str) -> Option<String> {
            match key {
                $($key => Some(pc.$($path).+.to_string()),)*
                _ => None,
            }
        }

        fn set_field(pc: &mut PipelineConfig, key: &str, value: &str) -> Option<Result<(), String>> {
            match key {
                $($key => Some(match value.parse() {
                    Ok(v) => {
                        pc.$($path).+ = v;
                        Ok(())
                    }
                    Err(_) => Err(format!("cannot parse {:?}", value)),
                }),)*
                _ => None,
            }
        }
    };
}

fields! {
    "seed" => seed;
    "data.embodiments" => data.embodiments;
    "data.motions" => data.motions;
    "data.scenes" => data.scenes;
    "data.frames" => data.canvas.frames;
    "data.height" => data.canvas.height;
    "data.width" => data.canvas.width;
    "data.pretrain_clips" => pretrain_clips;
    "data.unpaired_clips" => unpaired_clips;
    "data.pair_budget" => pair_budget;
    "split.holdout" => holdout;
    "split.motion_fraction" => motion_fraction;
    "split.scene_fraction" => scene_fraction;
    "model.embed_dim" => model.embed_dim;
    "model.heads" => model.heads;
    "model.depth" => model.depth;
    "model.patch" => model.patch;
    "model.lora_rank" => model.lora_rank;
    "model.lora_alpha" => model.lora_alpha;
    "model.motion_rank" => model.motion_rank;
    "model.text_tokens" => model.text_tokens;
    "model.ffn_mult" => model.ffn_mult;
    "model.chunk_frames" => model.chunk_frames;
    "model.decoupled" => model.decoupled;
    "pretrain.lr" => pretrain.lr;
    "pretrain.steps" => pretrain.steps;
    "pretrain.accum" => pretrain.accum;
    "pretrain.clip" => pretrain.clip;
    "pretrain.weight_decay" => pretrain.weight_decay;
    "pretrain.t_min" => pretrain.t_min;
    "pretrain.t_max" => pretrain.t_max;
    "pretrain.cond_dropout" => pretrain.cond_dropout;
    "stage1.lr" => stage1.lr;
    "stage1.steps" => stage1.steps;
    "stage1.accum" => stage1.accum;
    "stage1.clip" => stage1.clip;
    "stage1.weight_decay" => stage1.weight_decay;
    "stage1.t_min" => stage1.t_min;
    "stage1.t_max" => stage1.t_max;
    "stage2.lr" => stage2.lr;
    "stage2.steps" => stage2.steps;
    "stage2.accum" => stage2.accum;
    "stage2.clip" => stage2.clip;
    "stage2.weight_decay" => stage2.weight_decay;
    "stage2.t_min" => stage2.t_min;
    "stage2.t_max" => stage2.t_max;
    "adapt.lr" => adapt.lr;
    "adapt.steps" => adapt.steps;
    "adapt.accum" => adapt.accum;
    "adapt.clip" => adapt.clip;
    "adapt.weight_decay" => adapt.weight_decay;
    "adapt.t_min" => adapt.t_min;
    "adapt.t_max" => adapt.t_max;
    "eval.teacher_steps" => teacher_steps;
    "eval.cases" => eval_cases;
    "distill.clips" => distill_clips;
    "distill.lambda_vsd" => distill.lambda_vsd;
    "distill.lambda_gan" => distill.lambda_gan;
    "distill.student_steps" => distill.student_steps;
    "distill.teacher_steps" => distill.teacher_steps;
    "distill.tf_steps" => distill.tf_steps;
    "distill.sf_steps" => distill.sf_steps;
    "distill.lr" => distill.lr;
    "distill.critic_lr" => distill.critic_lr;
    "distill.disc_lr" => distill.disc_lr;
    "distill.clip" => distill.clip;
    "distill.disc_hidden" => distill.disc_hidden;
    "distill.t_min" => distill.t_min;
    "distill.t_max" => distill.t_max;
}

/// Keys with their own spelling rather than a `FromStr` field.
const ENUM_KEYS: [&str; 3] = ["preset", "model.text_rule", "stage2.scope"];

pub fn all_keys() -> Vec<&'static str> {
    let mut keys: Vec<&str> = ENUM_KEYS.to_vec();
    keys.extend_from_slice(FIELD_KEYS);
    keys.extend_from_slice(&PATH_KEYS);
    keys
}

/// Base settings a config starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 8 frames of 16x16 at d=64; runs the whole pipeline in minutes.
    Fast,
    /// 16 frames of 32x32 at d=64, depth 4.
    Toy,
}

impl Preset {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "fast" => Some(Preset::Fast),
            "toy" => Some(Preset::Toy),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Fast => "fast",
            Preset::Toy => "toy",
        }
    }

    fn base(self) -> PipelineConfig {
        match self {
            Preset::Fast => PipelineConfig::fast(),
            Preset::Toy => PipelineConfig::default(),
        }
    }
}

/// One `key = value` assignment and where it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub key: String,
    pub value: String,
    /// `None` for command-line overrides.
    pub line: Option<usize>,
}

fn parse_error(a: &Assignment, message: impl Into<String>) -> CliError {
    CliError::ConfigParse {
        key: a.key.clone(),
        line: a.line,
        message: message.into(),
    }
}

/// Assignments of a config document, in order.
pub fn parse_document(text: &str) -> Result<Vec<Assignment>, CliError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| CliError::ConfigParse {
            key: line.to_string(),
            line: Some(i + 1),
            message: "expected `key = value`".into(),
        })?;
        out.push(Assignment {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line: Some(i + 1),
        });
    }
    Ok(out)
}

/// A `--set key=value` override.
pub fn parse_override(s: &str) -> Result<Assignment, CliError> {
    let (key, value) = s.split_once('=').ok_or_else(|| CliError::ConfigParse {
        key: s.to_string(),
        line: None,
        message: "expected key=value".into(),
    })?;
    Ok(Assignment {
        key: key.trim().to_string(),
        value: value.trim().to_string(),
        line: None,
    })
}

/// Fully resolved configuration of one invocation.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub pipeline: PipelineConfig,
    pub runs_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Fast,
            pipeline: Preset::Fast.base(),
            runs_dir: "runs".into(),
        }
    }
}

impl RunConfig {
    /// Applies `assignments` in order on top of the preset they name (last
    /// `preset` wins, default `fast`). Unknown keys are errors.
    pub fn resolve(assignments: &[Assignment]) -> Result<Self, CliError> {
        let mut rc = RunConfig::default();
        if let Some(a) = assignments.iter().rev().find(|a| a.key == "preset") {
            rc.preset = Preset::parse(&a.value).ok_or_else(|| parse_error(a, "preset must be `fast` or `toy`"))?;
            rc.pipeline = rc.preset.base();
        }
        for a in assignments {
            rc.set(a)?;
        }
        let c = rc.pipeline.data.canvas;
        rc.pipeline.model.frames = c.frames;
        rc.pipeline.model.height = c.height;
        rc.pipeline.model.width = c.width;
        rc.pipeline
            .validate()
            .map_err(|e| CliError::InvalidConfig(e.to_string()))?;
        Ok(rc)
    }

    pub fn load(path: Option<&Path>, overrides: &[Assignment]) -> Result<Self, CliError> {
        let mut all = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {}", p.display(), e)))?;
                parse_document(&text)?
            }
            None => Vec::new(),
        };
        all.extend_from_slice(overrides);
        Self::resolve(&all)
    }

    fn set(&mut self, a: &Assignment) -> Result<(), CliError> {
        match a.key.as_str() {
            "preset" => Ok(()),
            "paths.runs" => {
                self.runs_dir = a.value.clone();
                Ok(())
            }
            "model.text_rule" => {
                self.pipeline.model.text_rule = match a.value.as_str() {
                    "isolated" => TextRule::Isolated,
                    "reads_den" => TextRule::ReadsDen,
                    _ => return Err(parse_error(a, "text_rule must be `isolated` or `reads_den`")),
                };
                Ok(())
            }
            "stage2.scope" => {
                self.pipeline.scope = match a.value.as_str() {
                    "motion_deltas" => SharedScope::MotionDeltas,
                    "all_shared" => SharedScope::AllShared,
                    _ => return Err(parse_error(a, "scope must be `motion_deltas` or `all_shared`")),
                };
                Ok(())
            }
            key => match set_field(&mut self.pipeline, key, &a.value) {
                Some(r) => r.map_err(|m| parse_error(a, m)),
                None => Err(parse_error(a, "unknown key")),
            },
        }
    }

    fn get(&self, key: &str) -> String {
        match key {
            "preset" => self.preset.name().into(),
            "paths.runs" => self.runs_dir.clone(),
            "model.text_rule" => match self.pipeline.model.text_rule {
                TextRule::Isolated => "isolated".into(),
                TextRule::ReadsDen => "reads_den".into(),
            },
            "stage2.scope" => match self.pipeline.scope {
                SharedScope::MotionDeltas => "motion_deltas".into(),
                SharedScope::AllShared => "all_shared".into(),
            },
            key => get_field(&self.pipeline, key).expect("every listed key is readable"),
        }
    }

    /// Every key with its resolved value; parsing this text reproduces the config.
    pub fn render(&self) -> String {
        let mut s = String::from("# resolved run config\n");
        for key in all_keys() {
            s.push_str(&format!("{} = {}\n", key, self.get(key)));
        }
        s
    }

    /// SHA-256 of the rendered config without path keys.
    pub fn digest(&self) -> String {
        let text: String = self
            .render()
            .lines()
            .filter(|l| !PATH_KEYS.iter().any(|k| l.starts_with(k)))
            .map(|l| format!("{}\n", l))
            .collect();
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn seed(&self) -> u64 {
        self.pipeline.seed
    }
}
