use std::collections::{HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdrec::config::RunConfig;
use rdrec::corpus::{synthetic, EntityIndex, ReviewRecord, ReviewSet};
use rdrec::distiller::{distill, MockBackend};
use rdrec::evaluator::{hr_at_k, paired, welch};
use rdrec::model::load_checkpoint;
use rdrec::pipeline::Prepared;
use rdrec::textcodec::Vocab;
use rdrec::trainer::{SampleBuilder, TrainData};
use statrs::distribution::{ContinuousCDF, StudentsT};

fn two_sided(t: f64, dof: f64) -> f64 {
    2.0 * StudentsT::new(0.0, 1.0, dof).unwrap().cdf(-t.abs())
}

#[test]
fn t_tests_agree_with_statrs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.random_range(2..15);
        let shift = rng.random_range(-1.0..1.0);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0) * 2.0 + shift).collect();
        for r in [welch(&a, &b), paired(&a, &b)] {
            let want = two_sided(r.t_statistic, r.dof);
            assert!((r.p_value - want).abs() < 1e-9, "t {} dof {}: {} vs {want}", r.t_statistic, r.dof, r.p_value);
        }
        // Welch's dof lies between the smaller group's and the pooled dof.
        let w = welch(&a, &b);
        assert!(w.dof >= (n - 1) as f64 - 1e-9 && w.dof <= (2 * n - 2) as f64 + 1e-9);
        assert_eq!(paired(&a, &b).dof, (n - 1) as f64);
    }
}

#[test]
fn three_item_history_segments_are_uniform() {
    let rs = ReviewSet::from_records((0..3).map(|i| ReviewRecord {
        user: "U".into(),
        item: format!("I{i}"),
        text: "nice".into(),
        ts: i,
    }));
    let entities = EntityIndex::from_reviews(&rs);
    let vocab = Vocab::build(&["predict the next item for user_1 after item_2 3"], 256).unwrap();
    let b = SampleBuilder::new(&vocab, &entities);
    let hist = [1u32, 2, 3];
    let segments = [
        b.sr_pair(1, &[1], 2).unwrap(),
        b.sr_pair(1, &[2], 3).unwrap(),
        b.sr_pair(1, &[1, 2], 3).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 30_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let s = b.make_sr_sample(1, &hist, &mut rng).unwrap();
        let which = segments.iter().position(|x| *x == s).expect("a contiguous segment");
        counts[which] += 1;
    }
    let expected = n as f64 / 3.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with 2 dof.
    assert!(chi2 < 13.82, "{counts:?}");
    for c in counts {
        assert!((c as f64 / n as f64 - 1.0 / 3.0).abs() <= 0.02);
    }
}

#[test]
fn uniform_rank_gives_hr10_of_a_tenth() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut items: Vec<String> = (0..100).map(|i| format!("i{i}")).collect();
    let n = 100_000;
    let mut hits = 0.0;
    for _ in 0..n {
        items.shuffle(&mut rng);
        hits += hr_at_k(&items, "i0", 10);
    }
    let hr = hits / n as f64;
    // Binomial sd is about 0.00095.
    assert!((hr - 0.10).abs() < 0.005, "{hr}");
}

fn synthetic_prepared(cfg: &RunConfig) -> Prepared {
    let rs = ReviewSet::from_records(synthetic::generate(&Default::default()));
    let quads = distill(&rs, &MockBackend::new(), None, 1).quads;
    Prepared::build(rs, quads, cfg).unwrap()
}

#[test]
fn held_out_labels_never_reach_training_pools() {
    let cfg = RunConfig::synthetic();
    let p = synthetic_prepared(&cfg);
    let data = TrainData::build(
        &p.reviews,
        &p.splits,
        &p.quads,
        &p.entities,
        &p.vocab,
        &cfg.trainer_config(1),
    )
    .unwrap();
    let num = |i: &String| p.entities.item_number(i).unwrap();
    let mut train_of = HashMap::new();
    let mut held_out = HashSet::new();
    for u in &p.splits.seq.users {
        let user = p.entities.user_number(&u.user).unwrap();
        train_of.insert(user, u.train.iter().map(num).collect::<Vec<_>>());
        held_out.insert((u.user.clone(), u.val.clone()));
        held_out.insert((u.user.clone(), u.test.clone()));
    }
    for (user, hist) in &data.sr_pool {
        assert_eq!(hist, &train_of[user]);
    }
    for (user, pos) in &data.tr_pool {
        assert!(train_of[user].contains(pos));
    }
    let b = SampleBuilder::new(&p.vocab, &p.entities);
    let leaked: HashSet<_> = p
        .reviews
        .interactions()
        .iter()
        .filter(|x| held_out.contains(&(x.user_id.clone(), x.item_id.clone())))
        .filter_map(|x| b.make_eg_sample(x).unwrap())
        .map(|s| s.input.ids)
        .collect();
    assert!(!leaked.is_empty());
    for s in &data.eg_pool {
        assert!(!leaked.contains(&s.input.ids), "explanation of a held-out pair in training");
    }
}

#[test]
fn checkpoint_holds_the_lowest_validation_loss() {
    let mut cfg = RunConfig::synthetic();
    cfg.trainer.max_epochs = 6;
    cfg.trainer.patience = 2;
    let p = synthetic_prepared(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let o = p.train(&cfg, 5, dir.path()).unwrap();
    let val = o.history.series("total", "val");
    let (epoch, best) = val
        .iter()
        .copied()
        .fold((0, f64::INFINITY), |acc, (e, l)| if l < acc.1 { (e, l) } else { acc });
    assert_eq!(o.best_epoch, epoch);
    assert_eq!(o.best_val_loss, best);
    let (m, _) = load_checkpoint(&o.checkpoint, None).unwrap();
    for ((_, name, a), (_, _, b)) in m.params().iter().zip(o.model.params().iter()) {
        assert_eq!(a.data(), b.data(), "{name}");
    }
}
