//! One function per subcommand. Data is regenerated from the config (it is
//! deterministic); models come from the run directories of earlier stages.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use tape_core::eval::{probe_invariants, write_frame_grid, Generator, StudentProbe};
use tape_core::model::{load_checkpoint, save_checkpoint, Dit, LoraBank};
use tape_core::pipeline::{
    evaluate_student, evaluate_teacher, prepare_data, pseudo_targets, run_adapt, run_pretrain,
    run_self_forcing, run_stage1, run_stage2, run_teacher_forcing, student_reference, PipelineData, StudentRun,
    TeacherRun,
};
use tape_core::streaming::rollout;
use tape_core::synthgen::{write_dataset, SplitRecord};
use tape_core::training::LossLog;

use crate::config::RunConfig;
use crate::runs::{require, Run};
use crate::store::{audits_from_tsv, audits_to_tsv, sets_listing};
use crate::CliError;

pub const GEN_DATA: &str = "gen-data";
pub const PRETRAIN: &str = "pretrain";
pub const TRAIN_LORA: &str = "train-lora";
pub const TRAIN_SHARED: &str = "train-shared";
pub const ADAPT: &str = "adapt";
pub const DISTILL_TF: &str = "distill-tf";
pub const DISTILL_SF: &str = "distill-sf";
pub const ROLLOUT: &str = "rollout";
pub const BENCH: &str = "bench";
pub const PROBE: &str = "probe";

const BACKBONE: &str = "backbone.ckpt";
const ADAPTERS: &str = "adapters.ckpt";
const AUDITS: &str = "audits.tsv";
const SHARED: &str = "shared.ckpt";
const STUDENT_TF: &str = "student_tf.ckpt";
const STUDENT: &str = "student.ckpt";

fn load_dit(rc: &RunConfig, path: &Path) -> Result<Dit, CliError> {
    Ok(Dit {
        cfg: rc.pipeline.model.clone(),
        params: load_checkpoint(path)?,
    })
}

fn read_audits(path: &Path) -> Result<Vec<tape_core::training::FreezeAudit>, CliError> {
    audits_from_tsv(&fs::read_to_string(path)?, path)
}

/// Writes every clip the run uses, the split and the pair list.
pub fn gen_data(rc: &RunConfig) -> Result<PathBuf, CliError> {
    let data = prepare_data(&rc.pipeline)?;
    let run = Run::start(rc, GEN_DATA)?;
    let s = &data.split;
    let mut splits = SplitRecord::default();
    for (kind, train, test) in [
        ("embodiment", &s.train_embodiments, &vec![s.test_embodiment.clone()]),
        ("motion", &s.train_motions, &s.test_motions),
        ("scene", &s.train_scenes, &s.test_scenes),
    ] {
        for id in train {
            splits.assign(kind, id, "train");
        }
        for id in test {
            splits.assign(kind, id, "test");
        }
    }
    let mut clips = Vec::new();
    let mut push = |c: &tape_core::synthgen::RenderedSequence| {
        if !clips.iter().any(|k: &tape_core::synthgen::RenderedSequence| k.sequence_id() == c.sequence_id()) {
            clips.push(c.clone());
        }
    };
    data.pretrain.iter().for_each(&mut push);
    data.unpaired.values().flatten().for_each(&mut push);
    data.adapt.iter().for_each(&mut push);
    for p in &data.pairs {
        push(&p.source);
        push(&p.target);
    }
    for c in &data.cases {
        push(&c.source);
        push(&c.target);
    }
    let pairs: Vec<(String, String)> = data
        .pairs
        .iter()
        .map(|p| (p.source.sequence_id(), p.target.sequence_id()))
        .collect();
    write_dataset(&run.path("dataset"), &clips, &splits, &pairs)?;
    run.write("sets.txt", &sets_listing(&data))?;
    run.finish()
}

pub fn pretrain(rc: &RunConfig) -> Result<PathBuf, CliError> {
    let data = prepare_data(&rc.pipeline)?;
    let run = Run::start(rc, PRETRAIN)?;
    let (dit, log) = run_pretrain(&rc.pipeline, &data)?;
    save_checkpoint(&run.path(BACKBONE), &dit.params)?;
    run.write("loss.tsv", &log.to_text())?;
    run.finish()
}

pub fn train_lora(rc: &RunConfig) -> Result<PathBuf, CliError> {
    let backbone = require(rc, TRAIN_LORA, PRETRAIN, BACKBONE)?;
    let data = prepare_data(&rc.pipeline)?;
    let mut run = Run::start(rc, TRAIN_LORA)?;
    let dit = load_dit(rc, &run.input(backbone)?)?;
    let (bank, log, audits) = run_stage1(&rc.pipeline, &data, &dit)?;
    bank.save(&run.path(ADAPTERS))?;
    run.write(AUDITS, &audits_to_tsv(&audits))?;
    run.write("loss.tsv", &log.to_text())?;
    run.finish()
}

pub fn train_shared(rc: &RunConfig) -> Result<PathBuf, CliError> {
    let backbone = require(rc, TRAIN_SHARED, PRETRAIN, BACKBONE)?;
    let adapters = require(rc, TRAIN_SHARED, TRAIN_LORA, ADAPTERS)?;
    let data = prepare_data(&rc.pipeline)?;
    let mut run = Run::start(rc, TRAIN_SHARED)?;
    let mut dit = load_dit(rc, &run.input(backbone)?)?;
    let bank = LoraBank::load(&run.input(adapters)?)?;
    let out = run_stage2(&rc.pipeline, &data, &mut dit, &bank)?;
    save_checkpoint(&run.path(SHARED), &dit.params)?;
    run.write(AUDITS, &audits_to_tsv(&[out.audit]))?;
    run.write("loss.tsv", &out.log.to_text())?;
    run.finish()
}

pub fn adapt(rc: &RunConfig) -> Result<PathBuf, CliError> {
    let shared = require(rc, ADAPT, TRAIN_SHARED, SHARED)?;
    let adapters = require(rc, ADAPT, TRAIN_LORA, ADAPTERS)?;
    let data = prepare_data(&rc.pipeline)?;
    let mut run = Run::start(rc, ADAPT)?;
    let dit = load_dit(rc, &run.input(shared)?)?;
    let mut bank = LoraBank::load(&run.input(adapters)?)?;
    let out = run_adapt(&rc.pipeline, &data, &dit, &mut bank)?;
    bank.save(&run.path(ADAPTERS))?;
    run.write(AUDITS, &audits_to_tsv(&[out.audit]))?;
    run.write("loss.tsv", &out.log.to_text())?;
    run.finish()
}

/// The adapted teacher with every freeze audit recorded so far.
fn load_teacher(rc: &RunConfig, stage: &str, run: &mut Run) -> Result<TeacherRun, CliError> {
    let shared = require(rc, stage, TRAIN_SHARED, SHARED)?;
    let adapters = require(rc, stage, ADAPT, ADAPTERS)?;
    let mut audits = Vec::new();
    for needed in [TRAIN_LORA, TRAIN_SHARED, ADAPT] {
        audits.extend(read_audits(&run.input(require(rc, stage, needed, AUDITS)?)?)?);
    }
    Ok(TeacherRun {
        dit: load_dit(rc, &run.input(shared)?)?,
        bank: LoraBank::load(&run.input(adapters)?)?,
        log: LossLog::default(),
        audits,
        timings: Vec::new(),
    })
}

fn load_student(rc: &RunConfig, data: &PipelineData, run: &mut Run, path: PathBuf) -> Result<StudentRun, CliError> {
    Ok(StudentRun {
        dit: load_dit(rc, &run.input(path)?)?,
        reference: student_reference(&rc.pipeline, data),
        log: LossLog::default(),
        teacher_digest: String::new(),
        timings: Vec::new(),
    })
}

pub fn distill_tf(rc: &RunConfig) -> Result<PathBuf, CliError> {
    require(rc, DISTILL_TF, ADAPT, ADAPTERS)?;
    let data = prepare_data(&rc.pipeline)?;
    let mut run = Run::start(rc, DISTILL_TF)?;
    let teacher = load_teacher(rc, DISTILL_TF, &mut run)?;
    let samples = pseudo_targets(&rc.pipeline, &data, &teacher)?;
    let (student, log) = run_teacher_forcing(&rc.pipeline, &data, &teacher, &samples)?;
    save_checkpoint(&run.path(STUDENT_TF), &student.params)?;
    run.write("loss.tsv", &log.to_text())?;
    run.finish()
}

pub fn distill_sf(rc: &RunConfig) -> Result<PathBuf, CliError> {
    let tf = require(rc, DISTILL_SF, DISTILL_TF, STUDENT_TF)?;
    let data = prepare_data(&rc.pipeline)?;
    let mut run = Run::start(rc, DISTILL_SF)?;
    let teacher = load_teacher(rc, DISTILL_SF, &mut run)?;
    let mut student = load_dit(rc, &run.input(tf)?)?;
    let samples = pseudo_targets(&rc.pipeline, &data, &teacher)?;
    let out = run_self_forcing(&rc.pipeline, &data, &teacher, &mut student, &samples)?;
    save_checkpoint(&run.path(STUDENT), &student.params)?;
    run.write("loss.tsv", &out.log.to_text())?;
    run.write("teacher_digest.txt", &format!("{}\n", out.teacher_digest))?;
    run.finish()
}

/// Source, target and generated clip of one held-out case as a PPM frame grid.
pub fn rollout_grid(rc: &RunConfig, case: usize, student: bool) -> Result<PathBuf, CliError> {
    require(rc, ROLLOUT, ADAPT, ADAPTERS)?;
    let data = prepare_data(&rc.pipeline)?;
    let mut run = Run::start(rc, ROLLOUT)?;
    let teacher = load_teacher(rc, ROLLOUT, &mut run)?;
    let c = data.cases.get(case).ok_or_else(|| {
        CliError::InvalidConfig(format!("case {} out of range ({} cases)", case, data.cases.len()))
    })?;
    let adapter = teacher.bank.get(&rc.pipeline.holdout);
    let seed = rc.pipeline.stage_seed(6);
    let generated = if student {
        let path = require(rc, ROLLOUT, DISTILL_SF, STUDENT)?;
        let s = load_student(rc, &data, &mut run, path)?;
        rollout(&s.dit, adapter, &c.source, &s.reference, &rc.pipeline.distill.rollout(seed))
            .map_err(|e| CliError::Pipeline(e.into()))?
            .sequence
    } else {
        let generator = Generator::Teacher {
            dit: &teacher.dit,
            steps: rc.pipeline.teacher_steps,
        };
        generator.generate(&c.source, adapter, seed)?.0
    };
    let name = format!("{}-{}.ppm", if student { "student" } else { "teacher" }, c.sample_id);
    write_frame_grid(&run.path(&name), &[&c.source, &c.target, &generated])?;
    run.finish()
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Held-out metrics of the teacher and, once distilled, the student.
pub fn bench(rc: &RunConfig) -> Result<PathBuf, CliError> {
    require(rc, BENCH, ADAPT, ADAPTERS)?;
    let data = prepare_data(&rc.pipeline)?;
    let mut run = Run::start(rc, BENCH)?;
    let teacher = load_teacher(rc, BENCH, &mut run)?;
    let t = evaluate_teacher(&rc.pipeline, &data, &teacher)?;
    run.write("teacher.tsv", &t.model.to_tsv())?;
    run.write("copy_source.tsv", &t.copy_source.to_tsv())?;
    run.write("mean_frame.tsv", &t.mean_frame.to_tsv())?;
    let mut summary = String::from("# report\tpsnr_db\tssim\tmse\tevaluations\tseconds\n");
    for (name, r, evals, elapsed) in [
        ("teacher", &t.model, t.evaluations, secs(t.elapsed)),
        ("copy_source", &t.copy_source, 0, 0.0),
        ("mean_frame", &t.mean_frame, 0, 0.0),
    ] {
        writeln!(summary, "{}\t{:.4}\t{:.6}\t{:.8}\t{}\t{:.3}", name, r.mean_psnr(), r.mean_ssim(), r.mean_mse(), evals, elapsed)
            .unwrap();
    }
    if let Ok(path) = require(rc, BENCH, DISTILL_SF, STUDENT) {
        let student = load_student(rc, &data, &mut run, path)?;
        let s = evaluate_student(&rc.pipeline, &data, &teacher, &student)?;
        run.write("student.tsv", &s.model.to_tsv())?;
        let r = &s.model;
        writeln!(summary, "student\t{:.4}\t{:.6}\t{:.8}\t{}\t{:.3}", r.mean_psnr(), r.mean_ssim(), r.mean_mse(), s.evaluations, secs(s.elapsed))
            .unwrap();
    }
    run.write("summary.tsv", &summary)?;
    print!("{}", summary);
    run.finish()
}

/// Structural invariants of the trained models.
pub fn probe(rc: &RunConfig, seeds: usize) -> Result<PathBuf, CliError> {
    require(rc, PROBE, ADAPT, ADAPTERS)?;
    let data = prepare_data(&rc.pipeline)?;
    let mut run = Run::start(rc, PROBE)?;
    let teacher = load_teacher(rc, PROBE, &mut run)?;
    let adapters: Vec<_> = teacher.bank.ids().iter().filter_map(|id| teacher.bank.get(id)).collect();
    let seeds: Vec<u64> = (0..seeds as u64).collect();
    let student = match require(rc, PROBE, DISTILL_SF, STUDENT) {
        Ok(path) => Some(load_student(rc, &data, &mut run, path)?),
        Err(_) => None,
    };
    let source = &data.cases[0].source;
    let sp = student.as_ref().map(|s| StudentProbe {
        student: &s.dit,
        adapter: teacher.bank.get(&rc.pipeline.holdout),
        reference: &s.reference,
        source,
    });
    let table = probe_invariants(&teacher.dit, &adapters, sp, &teacher.audits, &seeds);
    run.write("probes.tsv", &table.to_tsv())?;
    print!("{}", table.to_tsv());
    let dir = run.finish()?;
    if table.all_passed() {
        Ok(dir)
    } else {
        Err(CliError::Artifact {
            path: dir.join("probes.tsv").display().to_string(),
            message: "probe failures".into(),
        })
    }
}

/// Every stage in order, for a single-command run.
pub fn all(rc: &RunConfig) -> Result<PathBuf, CliError> {
    gen_data(rc)?;
    pretrain(rc)?;
    train_lora(rc)?;
    train_shared(rc)?;
    adapt(rc)?;
    distill_tf(rc)?;
    distill_sf(rc)?;
    probe(rc, 4)?;
    bench(rc)
}
