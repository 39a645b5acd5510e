//! Text formats for freeze audits and clip listings.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use tape_core::pipeline::PipelineData;
use tape_core::training::FreezeAudit;

use crate::CliError;

const MISSING: &str = "-";

/// Audits as TSV: a `# stage:` line per audit, then one row per tensor.
pub fn audits_to_tsv(audits: &[FreezeAudit]) -> String {
    let mut s = String::new();
    for a in audits {
        s.push_str(&format!("# stage: {}\n", a.stage));
        s.push_str("tensor\tdesignated\tupdated\tbefore\tafter\n");
        let names: BTreeSet<&String> = a
            .before
            .keys()
            .chain(a.after.keys())
            .chain(&a.designated)
            .chain(&a.updated)
            .collect();
        for n in names {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                n,
                a.designated.contains(n) as u8,
                a.updated.contains(n) as u8,
                a.before.get(n).map_or(MISSING, String::as_str),
                a.after.get(n).map_or(MISSING, String::as_str),
            ));
        }
    }
    s
}

pub fn audits_from_tsv(text: &str, path: &Path) -> Result<Vec<FreezeAudit>, CliError> {
    let bad = |line: usize, m: &str| CliError::Artifact {
        path: path.display().to_string(),
        message: format!("line {}: {}", line, m),
    };
    let mut out: Vec<FreezeAudit> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if let Some(stage) = line.strip_prefix("# stage: ") {
            out.push(FreezeAudit {
                stage: stage.to_string(),
                before: BTreeMap::new(),
                after: BTreeMap::new(),
                designated: BTreeSet::new(),
                updated: BTreeSet::new(),
            });
            continue;
        }
        if line.is_empty() || line.starts_with("tensor\t") {
            continue;
        }
        let a = out.last_mut().ok_or_else(|| bad(i + 1, "row before any stage"))?;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(bad(i + 1, "expected 5 columns"));
        }
        let name = f[0].to_string();
        match f[1] {
            "1" => {
                a.designated.insert(name.clone());
            }
            "0" => {}
            _ => return Err(bad(i + 1, "designated must be 0 or 1")),
        }
        match f[2] {
            "1" => {
                a.updated.insert(name.clone());
            }
            "0" => {}
            _ => return Err(bad(i + 1, "updated must be 0 or 1")),
        }
        if f[3] != MISSING {
            a.before.insert(name.clone(), f[3].to_string());
        }
        if f[4] != MISSING {
            a.after.insert(name, f[4].to_string());
        }
    }
    Ok(out)
}

/// Which clip ids feed which stage.
pub fn sets_listing(data: &PipelineData) -> String {
    let mut s = String::from("# set\tid\n");
    for c in &data.pretrain {
        s.push_str(&format!("pretrain\t{}\n", c.sequence_id()));
    }
    for clips in data.unpaired.values() {
        for c in clips {
            s.push_str(&format!("unpaired\t{}\n", c.sequence_id()));
        }
    }
    for p in &data.pairs {
        s.push_str(&format!("pair\t{}\t{}\n", p.source.sequence_id(), p.target.sequence_id()));
    }
    for c in &data.adapt {
        s.push_str(&format!("adapt\t{}\n", c.sequence_id()));
    }
    for c in &data.cases {
        s.push_str(&format!("case\t{}\n", c.sample_id));
    }
    s
}
