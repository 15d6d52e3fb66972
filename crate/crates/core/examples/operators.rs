//! The three sequence mixers side by side: how far WINDOW and LINEAR drift
//! from FULL on the same input, the window-covers-everything identity, a
//! causality probe, and the relative cost each operator is charged.
//!
//! cargo run --release --example operators

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dash::autodiff::{Tape, Tensor};
use dash::model::{apply_operator, MixerContext, ModelSpec, OperatorKind, Parameters};

fn mix(spec: &ModelSpec, params: &Parameters, kind: OperatorKind, x: &Tensor) -> Tensor {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let xn = tape.constant(x.clone());
    let ctx = MixerContext::new(spec, x.rows(), 1).unwrap();
    let y = apply_operator(
        &mut tape,
        kind,
        xn,
        &bound.layers[0].attn,
        &bound.layers[0].linear,
        &ctx,
    )
    .unwrap();
    tape.value(y).clone()
}

fn main() {
    let spec = ModelSpec {
        layers: 1,
        d_model: 16,
        n_heads: 2,
        vocab: 16,
        max_seq_len: 24,
        window: 4,
        ffn_mult: 2,
    };
    // Linear candidates start from the attention projections, as after alignment's initialization.
    let mut params = Parameters::init(&spec, 3);
    params.copy_attention_into_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = spec.max_seq_len;
    let x = Tensor::matrix(
        t,
        spec.d_model,
        (0..t * spec.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap();

    let full = mix(&spec, &params, OperatorKind::Full, &x);
    println!("relative distance from FULL output, by position:");
    println!("{:>4} {:>8} {:>8}", "t", "WINDOW", "LINEAR");
    let window = mix(&spec, &params, OperatorKind::Window, &x);
    let linear = mix(&spec, &params, OperatorKind::Linear, &x);
    let dist = |a: &Tensor, r: usize| {
        let (num, den) = a
            .row(r)
            .iter()
            .zip(full.row(r))
            .fold((0.0, 0.0), |(n, d), (u, v)| (n + (u - v) * (u - v), d + v * v));
        (num / den).sqrt()
    };
    for r in (0..t).step_by(3) {
        println!("{r:>4} {:>8.4} {:>8.4}", dist(&window, r), dist(&linear, r));
    }
    println!(
        "(WINDOW matches FULL exactly until the sequence outgrows the window of {})",
        spec.window
    );

    let wide = ModelSpec {
        window: t,
        ..spec.clone()
    };
    let same = mix(&wide, &params, OperatorKind::Window, &x).max_abs_diff(&full);
    println!("\nwindow = T: max |WINDOW − FULL| = {same:.1e}");

    let mut future = x.clone();
    for v in &mut future.data_mut()[12 * spec.d_model..] {
        *v = rng.gen_range(-5.0..5.0);
    }
    for kind in OperatorKind::ALL {
        let (a, b) = (mix(&spec, &params, kind, &x), mix(&spec, &params, kind, &future));
        let leak = (0..12)
            .flat_map(|r| {
                a.row(r)
                    .iter()
                    .zip(b.row(r))
                    .map(|(u, v)| (u - v).abs())
                    .collect::<Vec<_>>()
            })
            .fold(0.0f64, f64::max);
        println!("{kind:?}: rewriting positions ≥ 12 moves outputs < 12 by {leak:.1e}");
    }

    println!("\nrelative cost at T = 128, w = 16:");
    for kind in OperatorKind::ALL {
        println!("  {} {:?}: {}", kind.mnemonic(), kind, kind.relative_cost(16, 128));
    }
}
