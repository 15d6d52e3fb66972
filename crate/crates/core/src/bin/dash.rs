use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dash::corpus::Corpus;
use dash::harness::{
    arch_lines, emit_report, evaluate, heldout_set, load_checkpoint, parse_sweep, report_rows, run_sweep,
    save_checkpoint, sweep_csv, Checkpoint, Metadata, RunConfig, SweepInputs,
};
use dash::model::{HybridArch, Parameters};
use dash::search::{run_search, search_log_csv, CandidateSpace};
use dash::training::{align_candidates, distill, loss_curve_csv, train_teacher, Stage};
use dash::{DashError, Result};

#[derive(Parser)]
#[command(name = "dash", about = "Hybrid-attention layer allocation by differentiable search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long = "budget-space", global = true)]
    budget_space: Option<CandidateSpace>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus (corpus.bin).
    GenCorpus,
    /// Train the all-full-attention teacher (teacher.ckpt.json).
    TrainTeacher,
    /// Align linear candidates against the teacher (candidates.ckpt.json).
    Align,
    /// Run one architecture search (search.ckpt.json, arch.txt).
    Search,
    /// Search over the configured lambda and seed grid (sweep.csv).
    Sweep,
    /// Distill the searched architecture (student.ckpt.json).
    Distill,
    /// Evaluate the distilled student (eval.csv).
    Eval,
    /// Render SVG figures from sweep.csv.
    Report,
    /// Print the effective configuration as TOML.
    Config,
}

fn load_config(c: &Common) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(l) = c.lambda {
        cfg.search.lambda = l;
    }
    if let Some(space) = c.budget_space {
        cfg.search.space = space;
    }
    cfg.validate()?;
    let out = c.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    Ok((cfg, out))
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let p = dir.join(name);
    std::fs::write(&p, body).map_err(|e| DashError::io(p, e))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    std::fs::read_to_string(&p).map_err(|e| DashError::io(p, e))
}

fn checkpoint(
    cfg: &RunConfig,
    params: Parameters,
    arch: Option<HybridArch>,
    stage: Stage,
    step: usize,
    seed: u64,
) -> Checkpoint {
    Checkpoint {
        spec: cfg.model.clone(),
        params,
        arch,
        alpha: None,
        metadata: Metadata::new(stage, step, seed),
    }
}

fn check_spec(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<()> {
    if ckpt.spec != cfg.model {
        return Err(DashError::Config(
            "checkpoint model spec differs from the configuration".into(),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, out) = load_config(&cli.common)?;
    if !matches!(cli.command, Command::Config) {
        std::fs::create_dir_all(&out).map_err(|e| DashError::io(&out, e))?;
    }
    let spec = &cfg.model;
    let corpus = || Corpus::load(&out.join("corpus.bin"));
    let teacher = || {
        let c = load_checkpoint(&out.join("teacher.ckpt.json"))?;
        check_spec(&cfg, &c)?;
        Ok::<_, DashError>(c.params)
    };
    let candidates = || {
        let c = load_checkpoint(&out.join("candidates.ckpt.json"))?;
        check_spec(&cfg, &c)?;
        Ok::<_, DashError>(c.params)
    };
    match cli.command {
        Command::Config => print!("{}", cfg.to_toml()),
        Command::GenCorpus => {
            let c = dash::harness::build_corpus(&cfg)?;
            c.save(&out.join("corpus.bin"))?;
            println!(
                "wrote {} tokens to {}",
                c.tokens.len(),
                out.join("corpus.bin").display()
            );
        }
        Command::TrainTeacher => {
            let c = corpus()?;
            let (train, _) = c.split(cfg.corpus.heldout_fraction);
            let t = train_teacher(spec, Parameters::init(spec, cfg.teacher.seed), train, &cfg.teacher)?;
            write(&out, "teacher_loss.csv", &loss_curve_csv(&t.curve))?;
            let arch = HybridArch::all_full(spec.layers);
            save_checkpoint(
                &checkpoint(
                    &cfg,
                    t.params,
                    Some(arch),
                    Stage::Teacher,
                    cfg.teacher.steps,
                    cfg.teacher.seed,
                ),
                &out.join("teacher.ckpt.json"),
            )?;
            println!("final loss {:.5}", t.curve.last().map_or(f64::NAN, |p| p.loss));
        }
        Command::Align => {
            let c = corpus()?;
            let (train, _) = c.split(cfg.corpus.heldout_fraction);
            let a = align_candidates(spec, &teacher()?, train, &cfg.align)?;
            write(&out, "align_loss.csv", &loss_curve_csv(&a.curve))?;
            save_checkpoint(
                &checkpoint(&cfg, a.params, None, Stage::Align, cfg.align.steps, cfg.align.seed),
                &out.join("candidates.ckpt.json"),
            )?;
            println!(
                "final alignment loss {:.5}",
                a.curve.last().map_or(f64::NAN, |p| p.loss)
            );
        }
        Command::Search => {
            let c = corpus()?;
            let (train, _) = c.split(cfg.corpus.heldout_fraction);
            let cands = candidates()?;
            let s = run_search(spec, &cands, train, &cfg.search)?;
            write(&out, "search_log.csv", &search_log_csv(&s.log))?;
            write(&out, "arch.txt", &format!("{}\n", s.arch))?;
            let mut ck = checkpoint(
                &cfg,
                cands,
                Some(s.arch.clone()),
                Stage::Align,
                cfg.search.steps,
                cfg.search.seed,
            );
            ck.alpha = Some(s.state.clone());
            save_checkpoint(&ck, &out.join("search.ckpt.json"))?;
            let d = &s.diagnostics;
            println!("arch {}  budget {}", s.arch, s.budget);
            println!(
                "entropy {:.4}  top1 {:.4}  margin {:.4}  ambiguous {}",
                d.avg_entropy, d.avg_top1, d.avg_margin, d.ambiguous
            );
        }
        Command::Sweep => {
            let c = corpus()?;
            let (train, _) = c.split(cfg.corpus.heldout_fraction);
            let (t, cands) = (teacher()?, candidates()?);
            let heldout = heldout_set(&cfg, &c, &t)?;
            let inputs = SweepInputs {
                spec,
                teacher: &t,
                candidates: &cands,
                train_tokens: train,
                heldout: &heldout,
                search: &cfg.search,
                distill: cfg.sweep.distill.then_some(&cfg.distill),
            };
            let records = run_sweep(&inputs, &cfg.sweep.lambdas, &cfg.sweep.seeds)?;
            write(&out, "sweep.csv", &sweep_csv(&records))?;
            write(&out, "sweep_archs.txt", &arch_lines(&records))?;
            for r in &records {
                match &r.error {
                    Some(e) => eprintln!("lambda={} seed={} failed: {e}", r.lambda, r.seed),
                    None => println!(
                        "lambda={} seed={} budget={} kl={:.5}",
                        r.lambda, r.seed, r.budget, r.heldout_kl
                    ),
                }
            }
            if records.iter().any(|r| r.error.is_some()) {
                return Err(DashError::Config("one or more sweep runs failed".into()));
            }
        }
        Command::Distill => {
            let c = corpus()?;
            let (train, _) = c.split(cfg.corpus.heldout_fraction);
            let arch: HybridArch = read(&out, "arch.txt")?.trim().parse()?;
            let d = distill(spec, &teacher()?, candidates()?, &arch, train, &cfg.distill)?;
            write(&out, "distill_loss.csv", &loss_curve_csv(&d.curve))?;
            save_checkpoint(
                &checkpoint(
                    &cfg,
                    d.params,
                    Some(arch),
                    Stage::Distill,
                    cfg.distill.steps,
                    cfg.distill.seed,
                ),
                &out.join("student.ckpt.json"),
            )?;
            println!(
                "final distillation loss {:.5}",
                d.curve.last().map_or(f64::NAN, |p| p.loss)
            );
        }
        Command::Eval => {
            let c = corpus()?;
            let t = teacher()?;
            let student = load_checkpoint(&out.join("student.ckpt.json"))?;
            check_spec(&cfg, &student)?;
            let arch = student
                .arch
                .clone()
                .ok_or_else(|| DashError::Config("student checkpoint has no architecture".into()))?;
            let heldout = heldout_set(&cfg, &c, &t)?;
            let report = evaluate(&cfg, &c, &student.params, &arch, &heldout)?;
            write(
                &out,
                "eval.csv",
                &format!("{}\n{}\n", dash::eval::EvalReport::CSV_HEADER, report.csv_row()),
            )?;
            println!("{report}");
        }
        Command::Report => {
            let records = parse_sweep(&read(&out, "sweep.csv")?, &read(&out, "sweep_archs.txt")?)?;
            emit_report(&report_rows(&records), spec.window, cfg.search.seq_len, &out)?;
            println!(
                "wrote report.csv, allocation.svg and budget_kl.svg to {}",
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
