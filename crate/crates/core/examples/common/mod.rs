//! Shared setup for the examples that need a trained teacher.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use dash::corpus::Corpus;
use dash::eval::HeldoutSet;
use dash::harness::{build_corpus, heldout_set, load_checkpoint, save_checkpoint, Checkpoint, Metadata, RunConfig};
use dash::model::Parameters;
use dash::training::{align_candidates, train_teacher, Stage};

pub struct Prepared {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub teacher: Parameters,
    pub candidates: Parameters,
    pub heldout: HeldoutSet,
}

impl Prepared {
    pub fn train_tokens(&self) -> &[u16] {
        self.corpus.split(self.cfg.corpus.heldout_fraction).0
    }

    pub fn out_dir(&self) -> &Path {
        &self.cfg.paths.out
    }
}

/// The config named by the first command-line argument, or the desk config.
pub fn load_config() -> RunConfig {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.toml"));
    RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn cached(cfg: &RunConfig, name: &str, stage: Stage, train: impl FnOnce() -> Parameters) -> Parameters {
    let path = cfg.paths.out.join(name);
    if let Ok(ck) = load_checkpoint(&path) {
        if ck.spec == cfg.model {
            println!("reusing {}", path.display());
            return ck.params;
        }
    }
    let params = train();
    std::fs::create_dir_all(&cfg.paths.out).unwrap();
    let ck = Checkpoint {
        spec: cfg.model.clone(),
        params,
        arch: None,
        alpha: None,
        metadata: Metadata::new(stage, 0, cfg.seed),
    };
    save_checkpoint(&ck, &path).unwrap();
    ck.params
}

/// Corpus, teacher, aligned candidates and held-out set. Trained weights
/// are cached under `paths.out` so later examples start instantly.
///
/// Cached weights round-trip through 32-bit storage, so numbers can differ
/// slightly from a run that trains in-process.
pub fn prepare() -> Prepared {
    let cfg = load_config();
    let corpus = build_corpus(&cfg).unwrap();
    let train = corpus.split(cfg.corpus.heldout_fraction).0;
    let spec = &cfg.model;
    let teacher = cached(&cfg, "teacher.ckpt.json", Stage::Teacher, || {
        println!("training teacher ({} steps)", cfg.teacher.steps);
        train_teacher(spec, Parameters::init(spec, cfg.teacher.seed), train, &cfg.teacher)
            .unwrap()
            .params
    });
    let candidates = cached(&cfg, "candidates.ckpt.json", Stage::Align, || {
        println!("aligning linear candidates ({} steps)", cfg.align.steps);
        align_candidates(spec, &teacher, train, &cfg.align).unwrap().params
    });
    let heldout = heldout_set(&cfg, &corpus, &teacher).unwrap();
    Prepared {
        cfg,
        corpus,
        teacher,
        candidates,
        heldout,
    }
}
