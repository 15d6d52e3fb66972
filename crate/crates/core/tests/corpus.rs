use dash::corpus::{gen_corpus, GeneratorSpec, MarkovTable};

fn chain_tokens(spec: &GeneratorSpec, n: usize, seed: u64) -> Vec<usize> {
    let corpus = gen_corpus(seed, n, spec).unwrap();
    corpus
        .tokens
        .iter()
        .map(|&t| t as usize)
        .filter(|&t| t < spec.n_markov())
        .collect()
}

fn specs() -> [GeneratorSpec; 2] {
    [
        GeneratorSpec::default(),
        GeneratorSpec {
            vocab: 32,
            n_keys: 6,
            n_values: 6,
            pairs: 2,
            gap: 6,
            segment_rate: 0.03,
            successors: 3,
            smoothing: 0.05,
            table_seed: 1,
        },
    ]
}

#[test]
fn empirical_unigram_converges_to_stationary_distribution() {
    for spec in specs() {
        let table = MarkovTable::generate(&spec);
        let stationary = table.stationary_unigram();
        let chain = chain_tokens(&spec, 1_000_000, 17);
        let mut counts = vec![0usize; spec.n_markov()];
        for &t in &chain {
            counts[t] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&stationary)
            .map(|(&c, &p)| (c as f64 / chain.len() as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "total variation {tv} for {spec:?}");
    }
}

#[test]
fn sampled_surprisal_matches_entropy_rate() {
    for spec in specs() {
        let table = MarkovTable::generate(&spec);
        let chain = chain_tokens(&spec, 1_000_000, 23);
        let surprisal: f64 =
            chain.windows(3).map(|w| -table.row(w[0], w[1])[w[2]].ln()).sum::<f64>() / (chain.len() - 2) as f64;
        let rate = table.entropy_rate();
        assert!(
            (surprisal - rate).abs() < 0.01,
            "sampled {surprisal} vs analytic {rate}"
        );
        assert!(rate < (spec.n_markov() as f64).ln());
    }
}

#[test]
fn recall_segments_are_answerable_from_context() {
    let spec = specs()[1].clone();
    let corpus = gen_corpus(5, 200_000, &spec).unwrap();
    let t: Vec<usize> = corpus.tokens.iter().map(|&t| t as usize).collect();
    let mut checked = 0;
    for q in t
        .iter()
        .enumerate()
        .filter(|(_, &x)| x == spec.query_marker())
        .map(|(i, _)| i)
    {
        if q + 2 >= t.len() || q < spec.segment_len() {
            continue;
        }
        let (key, value) = (t[q + 1], t[q + 2]);
        let start = q - spec.gap - 2 * spec.pairs - 1;
        assert_eq!(t[start], spec.kv_marker());
        let pairs: Vec<(usize, usize)> = (0..spec.pairs)
            .map(|i| (t[start + 1 + 2 * i], t[start + 2 + 2 * i]))
            .collect();
        assert!(pairs.contains(&(key, value)), "query {key}->{value} not in {pairs:?}");
        checked += 1;
    }
    assert!(checked > 100);
}
