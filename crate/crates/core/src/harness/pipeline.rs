//! The stages chained end to end, plus the helpers the CLI shares with it.

use std::path::Path;

use super::checkpoint::{save_checkpoint, Checkpoint, Metadata};
use super::config::RunConfig;
use super::report::{emit_report, ReportRow};
use super::sweep::{arch_lines, run_sweep, sweep_csv, SweepInputs, SweepRecord};
use crate::corpus::{fixed_batches, gen_corpus, Corpus};
use crate::error::{DashError, Result};
use crate::eval::{eval_agreement, eval_heldout_kl, eval_recall_task, EvalReport, HeldoutSet, ModelPredictor};
use crate::model::{HybridArch, Parameters};
use crate::search::{run_search, search_log_csv, SearchOutcome};
use crate::training::{align_candidates, distill, loss_curve_csv, train_teacher, Stage, TrainOutcome};

/// Offset keeping held-out batch sampling independent of training draws.
const HELDOUT_SEED_SALT: u64 = 0x5eed_4e1d;

pub fn build_corpus(cfg: &RunConfig) -> Result<Corpus> {
    gen_corpus(cfg.seed, cfg.corpus.tokens, &cfg.corpus.generator)
}

pub fn heldout_set(cfg: &RunConfig, corpus: &Corpus, teacher: &Parameters) -> Result<HeldoutSet> {
    let (_, held) = corpus.split(cfg.corpus.heldout_fraction);
    if held.len() < cfg.eval.seq_len {
        return Err(DashError::Config(
            "held-out split shorter than one evaluation window".into(),
        ));
    }
    let batches = fixed_batches(
        held,
        cfg.eval.heldout_batches,
        cfg.eval.batch,
        cfg.eval.seq_len,
        cfg.seed ^ HELDOUT_SEED_SALT,
    );
    HeldoutSet::new(&cfg.model, teacher, batches)
}

pub fn evaluate(
    cfg: &RunConfig,
    corpus: &Corpus,
    student: &Parameters,
    arch: &HybridArch,
    heldout: &HeldoutSet,
) -> Result<EvalReport> {
    let kl = eval_heldout_kl(&cfg.model, student, arch, heldout)?;
    let agreement = eval_agreement(&cfg.model, student, arch, heldout)?;
    let predictor = ModelPredictor {
        spec: &cfg.model,
        params: student,
        arch,
    };
    let recall = eval_recall_task(&predictor, &corpus.spec, &cfg.eval.recall)?;
    Ok(EvalReport::new(
        arch,
        cfg.model.window,
        cfg.search.seq_len,
        kl,
        agreement,
        recall,
    ))
}

pub fn report_rows(records: &[SweepRecord]) -> Vec<ReportRow> {
    records
        .iter()
        .filter_map(|r| {
            r.arch.as_ref().map(|a| ReportRow {
                label: format!("lambda={} seed={}", r.lambda, r.seed),
                lambda: r.lambda,
                heldout_kl: r.heldout_kl,
                arch: a.clone(),
            })
        })
        .collect()
}

pub struct PipelineOutput {
    pub corpus: Corpus,
    pub teacher: TrainOutcome,
    pub candidates: TrainOutcome,
    pub sweep: Vec<SweepRecord>,
    pub search: SearchOutcome,
    pub student: TrainOutcome,
    pub report: EvalReport,
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| DashError::io(p, e))
}

/// Corpus → teacher → alignment → sweep → search → distillation → evaluation.
/// When `out` is given every artifact is written there.
pub fn run_pipeline(cfg: &RunConfig, out: Option<&Path>) -> Result<PipelineOutput> {
    cfg.validate()?;
    let spec = &cfg.model;
    let corpus = build_corpus(cfg)?;
    let (train, _) = corpus.split(cfg.corpus.heldout_fraction);
    let teacher = train_teacher(spec, Parameters::init(spec, cfg.teacher.seed), train, &cfg.teacher)?;
    let candidates = align_candidates(spec, &teacher.params, train, &cfg.align)?;
    let heldout = heldout_set(cfg, &corpus, &teacher.params)?;
    let inputs = SweepInputs {
        spec,
        teacher: &teacher.params,
        candidates: &candidates.params,
        train_tokens: train,
        heldout: &heldout,
        search: &cfg.search,
        distill: cfg.sweep.distill.then_some(&cfg.distill),
    };
    let sweep = run_sweep(&inputs, &cfg.sweep.lambdas, &cfg.sweep.seeds)?;
    let search = run_search(spec, &candidates.params, train, &cfg.search)?;
    let student = distill(
        spec,
        &teacher.params,
        candidates.params.clone(),
        &search.arch,
        train,
        &cfg.distill,
    )?;
    let report = evaluate(cfg, &corpus, &student.params, &search.arch, &heldout)?;

    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| DashError::io(dir, e))?;
        write(dir, "teacher_loss.csv", &loss_curve_csv(&teacher.curve))?;
        write(dir, "align_loss.csv", &loss_curve_csv(&candidates.curve))?;
        write(dir, "search_log.csv", &search_log_csv(&search.log))?;
        write(dir, "arch.txt", &format!("{}\n", search.arch))?;
        write(dir, "sweep.csv", &sweep_csv(&sweep))?;
        write(dir, "sweep_archs.txt", &arch_lines(&sweep))?;
        write(dir, "distill_loss.csv", &loss_curve_csv(&student.curve))?;
        write(
            dir,
            "eval.csv",
            &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()),
        )?;
        write(dir, "eval.txt", &format!("{report}\n"))?;
        let ckpt = |params: &Parameters, arch: Option<HybridArch>, stage, steps, seed| Checkpoint {
            spec: spec.clone(),
            params: params.clone(),
            arch,
            alpha: None,
            metadata: Metadata::new(stage, steps, seed),
        };
        save_checkpoint(
            &ckpt(
                &teacher.params,
                Some(HybridArch::all_full(spec.layers)),
                Stage::Teacher,
                cfg.teacher.steps,
                cfg.teacher.seed,
            ),
            &dir.join("teacher.ckpt.json"),
        )?;
        save_checkpoint(
            &ckpt(&candidates.params, None, Stage::Align, cfg.align.steps, cfg.align.seed),
            &dir.join("candidates.ckpt.json"),
        )?;
        save_checkpoint(
            &ckpt(
                &student.params,
                Some(search.arch.clone()),
                Stage::Distill,
                cfg.distill.steps,
                cfg.distill.seed,
            ),
            &dir.join("student.ckpt.json"),
        )?;
        let rows = report_rows(&sweep);
        if !rows.is_empty() {
            emit_report(&rows, spec.window, cfg.search.seq_len, dir)?;
        }
    }
    Ok(PipelineOutput {
        corpus,
        teacher,
        candidates,
        sweep,
        search,
        student,
        report,
    })
}
