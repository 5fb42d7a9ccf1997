//! Analytic gradients against central finite differences in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdrec::model::{Example, ModelConfig, Seq2Seq};
use rdrec::task::Task;
use rdrec::textcodec::TokenSequence;

fn config() -> ModelConfig {
    ModelConfig {
        n_layers: 1,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: 24,
        max_seq_len: 32,
        n_prompt_per_task: 3,
        n_tasks: 5,
        whole_word_capacity: 4,
        init_std: 0.3,
    }
}

fn sample() -> (TokenSequence, Vec<u32>) {
    let input = TokenSequence {
        ids: vec![5, 17, 3, 9, 9, 21, 4],
        whole_word: vec![0, 1, 1, 1, 0, 2, 2],
    };
    (input, vec![7, 19, 4, 1])
}

fn relative(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[test]
fn thirty_random_coordinates_match_central_differences() {
    let mut model = Seq2Seq::<f64>::new(config(), 11).unwrap();
    let (input, target) = sample();
    let ex = Example {
        task: Task::Explanation,
        input: &input,
        target: &target,
    };
    let analytic = model.forward_backward(&[ex]).unwrap().grads;

    // Only coordinates the loss can reach; untouched rows are covered below.
    let mut coords = Vec::new();
    for (id, _, m) in model.params().iter() {
        for flat in 0..m.data().len() {
            if analytic.value_at(id, flat) != 0.0 {
                coords.push((id, flat));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let eps = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..30 {
        let (id, flat) = coords[rng.random_range(0..coords.len())];
        let orig = model.params().value(id).data()[flat];
        model.params_mut().value_mut(id).data_mut()[flat] = orig + eps;
        let up = model.forward(&ex).unwrap().loss;
        model.params_mut().value_mut(id).data_mut()[flat] = orig - eps;
        let down = model.forward(&ex).unwrap().loss;
        model.params_mut().value_mut(id).data_mut()[flat] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let rel = relative(analytic.value_at(id, flat), numeric);
        worst = worst.max(rel);
        assert!(
            rel < 1e-4,
            "{}[{flat}]: analytic {} vs numeric {numeric} (rel {rel})",
            model.params().name(id),
            analytic.value_at(id, flat)
        );
    }
    eprintln!("worst relative error {worst:.3e}");
}

#[test]
fn untouched_whole_word_row_has_zero_gradient() {
    let model = Seq2Seq::<f64>::new(config(), 11).unwrap();
    let (input, target) = sample();
    let ex = Example {
        task: Task::Explanation,
        input: &input,
        target: &target,
    };
    let g = model.forward_backward(&[ex]).unwrap().grads;
    let id = model.params().id("embed.whole_word").unwrap();
    let d = config().d_model;
    for c in 0..d {
        assert_eq!(g.value_at(id, 3 * d + c), 0.0);
        assert_ne!(g.value_at(id, d + c), 0.0);
    }
}

#[test]
fn duplicated_sample_gives_identical_mean_gradient() {
    let model = Seq2Seq::<f64>::new(config(), 5).unwrap();
    let (input, target) = sample();
    let ex = Example {
        task: Task::TopN,
        input: &input,
        target: &target,
    };
    let one = model.forward_backward(&[ex]).unwrap();
    let two = model.forward_backward(&[ex, ex]).unwrap();
    assert_eq!(one.loss, two.loss);
    for (id, _, m) in model.params().iter() {
        for flat in 0..m.data().len() {
            let a = one.grads.value_at(id, flat);
            let b = two.grads.value_at(id, flat);
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0), "{a} vs {b}");
        }
    }
}

#[test]
fn gradients_reach_exactly_one_prompt_block() {
    let model = Seq2Seq::<f64>::new(config(), 5).unwrap();
    let (input, target) = sample();
    for task in Task::ALL {
        let ex = Example {
            task,
            input: &input,
            target: &target,
        };
        let g = model.forward_backward(&[ex]).unwrap().grads;
        for other in Task::ALL {
            let id = model.prompt_param(other);
            let touched = (0..3 * 16).any(|f| g.value_at(id, f) != 0.0);
            assert_eq!(touched, other == task, "{task} leaked into {other}");
        }
    }
}
