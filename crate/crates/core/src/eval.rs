//! Quality measurements for final models.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::corpus::{GeneratorSpec, MarkovTable};
use crate::error::{DashError, Result};
use crate::model::{logits, HybridArch, ModelSpec, OperatorKind, Parameters};
use crate::search::{kl_divergence, realized_budget};

/// Held-out batches together with the teacher's logits on each of them.
#[derive(Clone, Debug)]
pub struct HeldoutSet {
    pub batches: Vec<Vec<Vec<usize>>>,
    pub teacher_logits: Vec<Tensor>,
}

impl HeldoutSet {
    pub fn new(spec: &ModelSpec, teacher: &Parameters, batches: Vec<Vec<Vec<usize>>>) -> Result<HeldoutSet> {
        if batches.is_empty() {
            return Err(DashError::Config("held-out set needs at least one batch".into()));
        }
        let all_full = HybridArch::all_full(spec.layers);
        let teacher_logits = batches
            .iter()
            .map(|b| logits(spec, teacher, &all_full, b))
            .collect::<Result<_>>()?;
        Ok(HeldoutSet {
            batches,
            teacher_logits,
        })
    }
}

/// Mean unit-temperature distillation KL over the held-out batches.
pub fn eval_heldout_kl(spec: &ModelSpec, model: &Parameters, arch: &HybridArch, heldout: &HeldoutSet) -> Result<f64> {
    let mut total = 0.0;
    for (batch, zt) in heldout.batches.iter().zip(&heldout.teacher_logits) {
        let zs = logits(spec, model, arch, batch)?;
        total += kl_divergence(zt, &zs, 1.0);
    }
    Ok(total / heldout.batches.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of held-out positions where the model's argmax matches the teacher's.
pub fn eval_agreement(spec: &ModelSpec, model: &Parameters, arch: &HybridArch, heldout: &HeldoutSet) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (batch, zt) in heldout.batches.iter().zip(&heldout.teacher_logits) {
        let zs = logits(spec, model, arch, batch)?;
        for r in 0..zt.rows() {
            hits += usize::from(argmax(zt.row(r)) == argmax(zs.row(r)));
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Greedy next-token prediction at the last position of each prompt.
pub trait NextTokenPredictor {
    fn predict_last(&self, prompts: &[Vec<usize>]) -> Result<Vec<usize>>;
}

pub struct ModelPredictor<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a Parameters,
    pub arch: &'a HybridArch,
}

impl NextTokenPredictor for ModelPredictor<'_> {
    fn predict_last(&self, prompts: &[Vec<usize>]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(32) {
            let z = logits(self.spec, self.params, self.arch, chunk)?;
            let t = chunk[0].len();
            out.extend((0..chunk.len()).map(|b| argmax(z.row(b * t + t - 1))));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecallTask {
    pub pairs: usize,
    /// Chain tokens between the last pair and the query.
    pub gap: usize,
    pub trials: usize,
    pub seed: u64,
}

impl RecallTask {
    pub fn prompt_len(&self) -> usize {
        1 + 2 * self.pairs + self.gap + 2
    }
}

/// `KV k1 v1 … kn vn <gap> QUERY kj`, answered by `vj`.
pub fn recall_prompts(gen: &GeneratorSpec, task: &RecallTask) -> Result<Vec<(Vec<usize>, usize)>> {
    gen.validate()?;
    if task.pairs == 0 || task.pairs > gen.n_keys {
        return Err(DashError::Config("recall pairs must be in 1..=n_keys".into()));
    }
    let table = MarkovTable::generate(gen);
    let m = table.alphabet;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let mut out = Vec::with_capacity(task.trials);
    for _ in 0..task.trials {
        let keys = sample(&mut rng, gen.n_keys, task.pairs).into_vec();
        let values: Vec<usize> = (0..task.pairs).map(|_| rng.gen_range(0..gen.n_values)).collect();
        let mut prompt = vec![gen.kv_marker()];
        for (&k, &v) in keys.iter().zip(&values) {
            prompt.push(gen.key_token(k));
            prompt.push(gen.value_token(v));
        }
        let (mut a, mut b) = (rng.gen_range(0..m), rng.gen_range(0..m));
        for _ in 0..task.gap {
            let c = table.sample_next(a, b, &mut rng);
            prompt.push(c);
            (a, b) = (b, c);
        }
        let j = rng.gen_range(0..task.pairs);
        prompt.push(gen.query_marker());
        prompt.push(gen.key_token(keys[j]));
        out.push((prompt, gen.value_token(values[j])));
    }
    Ok(out)
}

/// Fraction of recall prompts answered exactly by greedy decoding.
pub fn eval_recall_task(model: &dyn NextTokenPredictor, gen: &GeneratorSpec, task: &RecallTask) -> Result<f64> {
    let items = recall_prompts(gen, task)?;
    if items.is_empty() {
        return Ok(0.0);
    }
    let prompts: Vec<Vec<usize>> = items.iter().map(|(p, _)| p.clone()).collect();
    let predictions = model.predict_last(&prompts)?;
    let hits = predictions.iter().zip(&items).filter(|(p, (_, a))| *p == a).count();
    Ok(hits as f64 / items.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub heldout_kl: f64,
    pub agreement: f64,
    pub recall_accuracy: f64,
    pub budget: f64,
    pub n_full: usize,
    pub n_window: usize,
    pub n_linear: usize,
    pub arch: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "heldout_kl,agreement,recall_accuracy,budget,n_full,n_window,n_linear,arch";

    pub fn new(
        arch: &HybridArch,
        window: usize,
        seq_len: usize,
        heldout_kl: f64,
        agreement: f64,
        recall_accuracy: f64,
    ) -> Self {
        EvalReport {
            heldout_kl,
            agreement,
            recall_accuracy,
            budget: realized_budget(arch, window, seq_len),
            n_full: arch.count(OperatorKind::Full),
            n_window: arch.count(OperatorKind::Window),
            n_linear: arch.count(OperatorKind::Linear),
            arch: arch.to_string(),
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.heldout_kl,
            self.agreement,
            self.recall_accuracy,
            self.budget,
            self.n_full,
            self.n_window,
            self.n_linear,
            self.arch
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "architecture      {}", self.arch)?;
        writeln!(
            f,
            "budget            {:.4}  ({} full, {} window, {} linear)",
            self.budget, self.n_full, self.n_window, self.n_linear
        )?;
        writeln!(f, "held-out KL       {:.6}", self.heldout_kl)?;
        writeln!(f, "agreement         {:.4}", self.agreement)?;
        write!(f, "recall accuracy   {:.4}", self.recall_accuracy)
    }
}

/// Ranks with ties averaged, starting at 1.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation (Pearson correlation of tie-averaged ranks).
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let (rx, ry) = (ranks(xs), ranks(ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use std::cell::RefCell;

    use super::*;

    fn gen() -> GeneratorSpec {
        GeneratorSpec {
            vocab: 32,
            n_keys: 6,
            n_values: 6,
            pairs: 2,
            gap: 6,
            segment_rate: 0.05,
            successors: 3,
            smoothing: 0.05,
            table_seed: 2,
        }
    }

    fn spec() -> ModelSpec {
        ModelSpec {
            layers: 3,
            d_model: 8,
            n_heads: 2,
            vocab: 32,
            max_seq_len: 16,
            window: 2,
            ffn_mult: 2,
        }
    }

    /// Reads the answer straight out of the prompt.
    struct Lookup;
    impl NextTokenPredictor for Lookup {
        fn predict_last(&self, prompts: &[Vec<usize>]) -> Result<Vec<usize>> {
            Ok(prompts
                .iter()
                .map(|p| {
                    let key = *p.last().unwrap();
                    let pos = p.iter().position(|&t| t == key).unwrap();
                    p[pos + 1]
                })
                .collect())
        }
    }

    struct RandomValue(GeneratorSpec, RefCell<ChaCha8Rng>);
    impl NextTokenPredictor for RandomValue {
        fn predict_last(&self, prompts: &[Vec<usize>]) -> Result<Vec<usize>> {
            let mut rng = self.1.borrow_mut();
            Ok(prompts
                .iter()
                .map(|_| self.0.value_token(rng.gen_range(0..self.0.n_values)))
                .collect())
        }
    }

    #[test]
    fn lookup_oracle_is_perfect() {
        let task = RecallTask {
            pairs: 3,
            gap: 5,
            trials: 200,
            seed: 1,
        };
        assert_eq!(eval_recall_task(&Lookup, &gen(), &task).unwrap(), 1.0);
    }

    #[test]
    fn random_guessing_matches_binomial_expectation() {
        let n = 6000;
        let task = RecallTask {
            pairs: 3,
            gap: 5,
            trials: n,
            seed: 2,
        };
        let model = RandomValue(gen(), RefCell::new(ChaCha8Rng::seed_from_u64(3)));
        let acc = eval_recall_task(&model, &gen(), &task).unwrap();
        let p = 1.0 / 6.0;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn prompts_have_the_gap_between_pairs_and_query() {
        let task = RecallTask {
            pairs: 2,
            gap: 7,
            trials: 20,
            seed: 4,
        };
        for (p, answer) in recall_prompts(&gen(), &task).unwrap() {
            assert_eq!(p.len(), task.prompt_len());
            assert_eq!(p[0], gen().kv_marker());
            assert_eq!(p[p.len() - 2], gen().query_marker());
            assert!(gen().is_value(answer));
            assert!(p[5..5 + 7].iter().all(|&t| t < gen().n_markov()));
        }
    }

    #[test]
    fn teacher_against_itself() {
        let s = spec();
        let p = Parameters::init(&s, 1);
        let batches =
            crate::corpus::fixed_batches(&(0..300).map(|i| (i * 7 % 32) as u16).collect::<Vec<_>>(), 3, 2, 10, 5);
        let h = HeldoutSet::new(&s, &p, batches).unwrap();
        let full = HybridArch::all_full(3);
        assert_eq!(eval_heldout_kl(&s, &p, &full, &h).unwrap(), 0.0);
        assert_eq!(eval_agreement(&s, &p, &full, &h).unwrap(), 1.0);
        let mut q = p.clone();
        q.copy_attention_into_linear();
        let lin = HybridArch::all_linear(3);
        assert!(eval_heldout_kl(&s, &q, &lin, &h).unwrap() > 0.0);
        let a = eval_agreement(&s, &q, &lin, &h).unwrap();
        assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-15);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-15);
        assert_eq!(ranks(&[3.0, 1.0, 3.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn report_formats() {
        let arch: HybridArch = "L F W L".parse().unwrap();
        let r = EvalReport::new(&arch, 16, 128, 0.25, 0.5, 0.75);
        assert_eq!(r.budget, 1.125);
        assert_eq!(r.csv_row(), "0.25,0.5,0.75,1.125,1,1,2,L F W L");
        assert!(r.to_string().contains("held-out KL"));
        assert_eq!(
            EvalReport::CSV_HEADER.split(',').count(),
            r.csv_row().split(',').count()
        );
    }
}
