use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdrec::model::{Example, ModelConfig, Seq2Seq, Tape};
use rdrec::task::Task;
use rdrec::textcodec::TokenSequence;

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_ff: 32,
        vocab_size: vocab,
        max_seq_len: 32,
        n_prompt_per_task: 3,
        n_tasks: 5,
        whole_word_capacity: 4,
        init_std: 0.3,
    }
}

fn input() -> TokenSequence {
    TokenSequence {
        ids: vec![5, 17, 3, 9, 9, 21, 4],
        whole_word: vec![0, 1, 1, 1, 0, 2, 2],
    }
}

#[test]
fn uniform_logits_cost_ln_vocab() {
    for vocab in [24usize, 100, 2048] {
        let mut model = Seq2Seq::<f64>::new(config(vocab), 1).unwrap();
        let head = model.params().id("lm_head").unwrap();
        model.params_mut().value_mut(head).data_mut().fill(0.0);
        let inp = input();
        let target = vec![7, 19, 4, 1];
        let out = model
            .forward(&Example {
                task: Task::Sequential,
                input: &inp,
                target: &target,
            })
            .unwrap();
        assert!((out.loss - (vocab as f64).ln()).abs() < 1e-6, "{vocab}: {}", out.loss);
    }
}

fn decoder_logits(model: &Seq2Seq<f64>, inp: &TokenSequence, dec: &[u32]) -> Vec<Vec<f64>> {
    let mut tape = Tape::inference(model.params());
    let enc = model.encode(&mut tape, inp, Task::Explanation).unwrap();
    let logits = model.decode(&mut tape, &enc, dec).unwrap();
    let m = tape.value(logits);
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[test]
fn decoder_rows_ignore_later_tokens() {
    let model = Seq2Seq::<f64>::new(config(24), 2).unwrap();
    let inp = input();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let len = rng.random_range(2..8);
        let mut dec: Vec<u32> = (0..len).map(|_| rng.random_range(0..24)).collect();
        dec[0] = 0;
        let base = decoder_logits(&model, &inp, &dec);
        let j = rng.random_range(1..len);
        let mut changed = dec.clone();
        changed[j] = (changed[j] + 1 + rng.random_range(0..22)) % 24;
        let other = decoder_logits(&model, &inp, &changed);
        for r in 0..j {
            assert_eq!(base[r], other[r], "row {r} saw position {j}");
        }
        assert_ne!(base[j], other[j]);
    }
}

#[test]
fn encoder_sees_the_whole_input() {
    let model = Seq2Seq::<f64>::new(config(24), 3).unwrap();
    let inp = input();
    let dec = [0u32, 8];
    let base = decoder_logits(&model, &inp, &dec);
    let mut last = inp.clone();
    *last.ids.last_mut().unwrap() = 11;
    let other = decoder_logits(&model, &last, &dec);
    // Both rows move, including the first: no causal mask on the source.
    assert_ne!(base[0], other[0]);
    assert_ne!(base[1], other[1]);
}

#[test]
fn whole_word_rows_are_added_before_scaling() {
    let model = Seq2Seq::<f64>::new(config(24), 4).unwrap();
    let inp = input();
    let mut flat = inp.clone();
    flat.whole_word.fill(0);
    let embed = |s: &TokenSequence| {
        let mut tape = Tape::inference(model.params());
        let v = model.embed_input(&mut tape, s, Task::TopN).unwrap();
        tape.value(v).clone()
    };
    let (a, b) = (embed(&inp), embed(&flat));
    let table = model.params().value(model.params().id("embed.whole_word").unwrap());
    let scale = 16f64.sqrt();
    for (pos, &w) in inp.whole_word.iter().enumerate() {
        for c in 0..16 {
            let want = scale * (table.get(w as usize, c) - table.get(0, c));
            assert!((a.get(pos, c) - b.get(pos, c) - want).abs() < 1e-12);
        }
    }
    // Prompt rows carry the null index either way.
    for pos in inp.len()..inp.len() + 3 {
        assert_eq!(a.row(pos), b.row(pos));
    }
}
