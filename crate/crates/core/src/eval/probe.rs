use std::fmt::Write;
use std::sync::Arc;

use crate::model::{
    build_branch_mask, forward, teacher_layout, Bound, BoundAdapter, Dit, LoRAAdapter, ModelInputs, Role,
};
use crate::rng::child_rng;
use crate::streaming::{build_block_causal_mask, build_superchunk_layout, rollout, RolloutConfig};
use crate::substrate::{AttentionMask, Tape, Tensor};
use crate::synthgen::RenderedSequence;
use crate::training::FreezeAudit;

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl ProbeResult {
    fn new(name: &str, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProbeTable {
    pub rows: Vec<ProbeResult>,
}

impl ProbeTable {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("probe\tresult\tdetail\n");
        for r in &self.rows {
            writeln!(s, "{}\t{}\t{}", r.name, if r.passed { "pass" } else { "fail" }, r.detail).unwrap();
        }
        s
    }
}

/// Cond-token hidden states and keys/values at every block.
fn cond_activations(
    dit: &Dit,
    adapter: Option<&LoRAAdapter>,
    mask: &Arc<AttentionMask>,
    layout: &crate::model::TokenLayout,
    inputs: &ModelInputs,
) -> Result<Vec<Tensor>, String> {
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, &dit.params, |_| false);
    let a = adapter.map(|a| BoundAdapter::new(&mut tape, a, false));
    let out = forward(&mut tape, &dit.cfg, &p, a.as_ref(), layout, mask, inputs, None).map_err(|e| e.to_string())?;
    let idx = layout.indices(|r| r == Role::Cond);
    let mut acts = Vec::new();
    for (h, (k, v)) in out.hidden.iter().zip(&out.kv) {
        for var in [h, k, v] {
            acts.push(tape.value(*var).gather_rows(&idx));
        }
    }
    Ok(acts)
}

/// Cond activations are bit-identical when every den token is redrawn, for
/// every seed and with each adapter (and none) active. `mutate` lets a
/// caller corrupt the mask to confirm the probe can fail.
pub fn probe_flow_isolation(
    dit: &Dit,
    adapters: &[&LoRAAdapter],
    seeds: &[u64],
    mutate: Option<&dyn Fn(&AttentionMask, &crate::model::TokenLayout) -> AttentionMask>,
) -> ProbeResult {
    let cfg = &dit.cfg;
    let layout = teacher_layout(cfg, cfg.frames, cfg.frames);
    let mask = match build_branch_mask(&layout, cfg.text_rule) {
        Ok(m) => m,
        Err(e) => return ProbeResult::new("flow_isolation", false, e.to_string()),
    };
    let mask = Arc::new(match mutate {
        Some(f) => f(&mask, &layout),
        None => mask,
    });
    let mut choices: Vec<Option<&LoRAAdapter>> = vec![None];
    choices.extend(adapters.iter().map(|a| Some(*a)));
    let den = layout.indices(|r| r == Role::Den);
    let mut checked = 0;
    for &seed in seeds {
        let mut rng = child_rng(seed, 0x666c_6f77);
        let patches = Tensor::uniform(&[layout.len(), cfg.patch_dim()], -1.0, 1.0, &mut rng);
        let t = 0.3 + 0.4 * (seed % 7) as f64 / 7.0;
        let times: Vec<f64> = layout.roles.iter().map(|r| if *r == Role::Den { t } else { 0.0 }).collect();
        let base = ModelInputs { patches, times };
        let mut other = base.clone();
        let fresh = Tensor::uniform(&[den.len(), cfg.patch_dim()], -3.0, 3.0, &mut rng);
        for (j, &i) in den.iter().enumerate() {
            other.patches.data_mut()[i * cfg.patch_dim()..(i + 1) * cfg.patch_dim()].copy_from_slice(fresh.row(j));
            other.times[i] = 1.0 - t;
        }
        for a in &choices {
            let x = cond_activations(dit, *a, &mask, &layout, &base);
            let y = cond_activations(dit, *a, &mask, &layout, &other);
            match (x, y) {
                (Ok(x), Ok(y)) => {
                    if let Some(b) = x.iter().zip(&y).position(|(p, q)| !p.bits_eq(q)) {
                        return ProbeResult::new(
                            "flow_isolation",
                            false,
                            format!("seed {} adapter {:?}: block {} differs", seed, a.map(|a| &a.embodiment_id), b / 3),
                        );
                    }
                }
                (Err(e), _) | (_, Err(e)) => return ProbeResult::new("flow_isolation", false, e),
            }
            checked += 1;
        }
    }
    ProbeResult::new("flow_isolation", true, format!("{} seed/adapter combinations bit-identical", checked))
}

/// Flips the first visible-false cond→den entry of `mask`.
pub fn leak_one_den_entry(mask: &AttentionMask, layout: &crate::model::TokenLayout) -> AttentionMask {
    let q = layout.indices(|r| r == Role::Cond)[0];
    let k = layout.indices(|r| r == Role::Den)[0];
    mask.with_flipped(q, k)
}

/// The branch mask follows the branch rule exhaustively and the block-causal
/// mask for two extra chunks of unit spans matches its enumeration.
pub fn probe_mask_structure(dit: &Dit) -> ProbeResult {
    let cfg = &dit.cfg;
    let layout = teacher_layout(cfg, cfg.frames, cfg.frames);
    let mask = match build_branch_mask(&layout, cfg.text_rule) {
        Ok(m) => m,
        Err(e) => return ProbeResult::new("mask_structure", false, e.to_string()),
    };
    for i in 0..layout.len() {
        for j in 0..layout.len() {
            let leak = layout.roles[i] == Role::Cond && layout.roles[j] == Role::Den;
            if leak && mask.visible(i, j) {
                return ProbeResult::new("mask_structure", false, format!("cond {} reads den {}", i, j));
            }
            if layout.roles[i] == Role::Den && !mask.visible(i, j) {
                return ProbeResult::new("mask_structure", false, format!("den {} cannot read {}", i, j));
            }
        }
    }
    let oracle = [
        "1000000", "0100000", "1110000", "0101000", "1111100", "0101010", "1111111",
    ];
    let causal = build_block_causal_mask(&build_superchunk_layout(2, 1, 1, 1).expect("unit spans are valid"));
    for (i, row) in oracle.iter().enumerate() {
        for (j, ch) in row.chars().enumerate() {
            if causal.visible(i, j) != (ch == '1') {
                return ProbeResult::new("mask_structure", false, format!("causal entry ({}, {})", i, j));
            }
        }
    }
    ProbeResult::new("mask_structure", true, format!("{} branch entries and 49 causal entries", layout.len().pow(2)))
}

/// Cached rollout against the uncached forward.
pub fn probe_cache(student: &Dit, adapter: Option<&LoRAAdapter>, source: &RenderedSequence, reference: &Tensor) -> ProbeResult {
    let run = |use_cache| {
        rollout(
            student,
            adapter,
            source,
            reference,
            &RolloutConfig {
                use_cache,
                ..RolloutConfig::default()
            },
        )
    };
    match (run(true), run(false)) {
        (Ok(a), Ok(b)) => {
            let worst = a.chunks.iter().zip(&b.chunks).map(|(x, y)| x.rel_error(y)).fold(0.0, f64::max);
            ProbeResult::new(
                "cache_equivalence",
                worst <= 1e-5,
                format!("{} chunks, max relative error {:.3e}", a.chunks.len(), worst),
            )
        }
        (Err(e), _) | (_, Err(e)) => ProbeResult::new("cache_equivalence", false, e.to_string()),
    }
}

/// Every generated chunk is bit-invariant to rewriting all later source frames.
pub fn probe_causality(student: &Dit, adapter: Option<&LoRAAdapter>, source: &RenderedSequence, reference: &Tensor) -> ProbeResult {
    let cfg = &student.cfg;
    let rc = RolloutConfig::default();
    let base = match rollout(student, adapter, source, reference, &rc) {
        Ok(b) => b,
        Err(e) => return ProbeResult::new("causality", false, e.to_string()),
    };
    for i in 0..cfg.chunks().saturating_sub(1) {
        let mut changed = source.clone();
        let from = (i + 1) * cfg.chunk_frames * changed.frame_len();
        for v in &mut changed.data[from..] {
            *v = 1.0 - *v;
        }
        match rollout(student, adapter, &changed, reference, &rc) {
            Ok(alt) => {
                if (0..=i).any(|j| !alt.chunks[j].bits_eq(&base.chunks[j])) {
                    return ProbeResult::new("causality", false, format!("chunks up to {} moved", i));
                }
            }
            Err(e) => return ProbeResult::new("causality", false, e.to_string()),
        }
    }
    ProbeResult::new("causality", true, format!("{} chunk prefixes bit-invariant", cfg.chunks().saturating_sub(1)))
}

pub fn probe_freeze(audits: &[FreezeAudit]) -> ProbeResult {
    for a in audits {
        if !a.passes() {
            return ProbeResult::new(
                "freeze_audit",
                false,
                format!("{}: changed outside partition {:?}", a.stage, a.violations()),
            );
        }
    }
    ProbeResult::new("freeze_audit", true, format!("{} stages audited", audits.len()))
}

/// Inputs of the student probes: the student, its reference tokens and a source clip.
pub struct StudentProbe<'a> {
    pub student: &'a Dit,
    pub adapter: Option<&'a LoRAAdapter>,
    pub reference: &'a Tensor,
    pub source: &'a RenderedSequence,
}

/// Runs every probe that the given artifacts allow.
pub fn probe_invariants(
    model: &Dit,
    adapters: &[&LoRAAdapter],
    student: Option<StudentProbe>,
    audits: &[FreezeAudit],
    seeds: &[u64],
) -> ProbeTable {
    let mut rows = vec![
        probe_flow_isolation(model, adapters, seeds, None),
        probe_mask_structure(model),
    ];
    if let Some(s) = student {
        rows.push(probe_cache(s.student, s.adapter, s.source, s.reference));
        rows.push(probe_causality(s.student, s.adapter, s.source, s.reference));
    }
    if !audits.is_empty() {
        rows.push(probe_freeze(audits));
    }
    ProbeTable { rows }
}
