//! A straight-line reimplementation of the forward pass with plain loops,
//! reading weights by name. It shares no code with the tape.

use rdrec::model::{Example, ModelConfig, Seq2Seq};
use rdrec::task::Task;
use rdrec::textcodec::TokenSequence;

type M = Vec<Vec<f64>>;

struct Oracle<'a> {
    model: &'a Seq2Seq<f64>,
    cfg: ModelConfig,
}

impl Oracle<'_> {
    fn w(&self, name: &str) -> M {
        let m = self.model.params().get(name).unwrap_or_else(|| panic!("{name}"));
        (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
    }

    fn mm(a: &M, b: &M) -> M {
        let (n, k, p) = (a.len(), b.len(), b[0].len());
        let mut c = vec![vec![0.0; p]; n];
        for i in 0..n {
            for j in 0..p {
                let mut s = 0.0;
                for t in 0..k {
                    s += a[i][t] * b[t][j];
                }
                c[i][j] = s;
            }
        }
        c
    }

    fn add(a: &M, b: &M) -> M {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    fn norm(&self, x: &M, prefix: &str) -> M {
        let g = &self.w(&format!("{prefix}.gain"))[0];
        let b = &self.w(&format!("{prefix}.bias"))[0];
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + 1e-6).sqrt();
                row.iter().enumerate().map(|(i, v)| (v - mean) * inv * g[i] + b[i]).collect()
            })
            .collect()
    }

    fn mha(&self, q: &M, k: &M, v: &M, causal: bool) -> M {
        let h = self.cfg.n_heads;
        let dh = self.cfg.d_model / h;
        let mut out = vec![vec![0.0; self.cfg.d_model]; q.len()];
        for head in 0..h {
            let off = head * dh;
            for i in 0..q.len() {
                let visible = if causal { i + 1 } else { k.len() };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| (0..dh).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..visible {
                    for c in 0..dh {
                        out[i][off + c] += e[j] / z * v[j][off + c];
                    }
                }
            }
        }
        out
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    fn ffn(&self, x: &M, prefix: &str) -> M {
        let h = self.norm(x, &format!("{prefix}.ffn_norm"));
        let u = Self::mm(&h, &self.w(&format!("{prefix}.ffn.in")));
        let u: M = u.iter().map(|r| r.iter().map(|&v| Self::gelu(v)).collect()).collect();
        Self::add(x, &Self::mm(&u, &self.w(&format!("{prefix}.ffn.out"))))
    }

    fn self_attn(&self, x: &M, norm: &str, attn: &str, causal: bool) -> M {
        let h = self.norm(x, norm);
        let q = Self::mm(&h, &self.w(&format!("{attn}.q")));
        let k = Self::mm(&h, &self.w(&format!("{attn}.k")));
        let v = Self::mm(&h, &self.w(&format!("{attn}.v")));
        let a = self.mha(&q, &k, &v, causal);
        Self::add(x, &Self::mm(&a, &self.w(&format!("{attn}.o"))))
    }

    fn position(pos: usize, i: usize, d: usize) -> f64 {
        let angle = pos as f64 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }

    fn loss(&self, task: Task, input: &TokenSequence, target: &[u32]) -> f64 {
        let d = self.cfg.d_model;
        let scale = (d as f64).sqrt();
        let tok = self.w("embed.token");
        let ww = self.w("embed.whole_word");
        let prompt = self.w(&format!("prompt.{}", task.tag()));

        let mut rows: M = input.ids.iter().map(|&t| tok[t as usize].clone()).collect();
        rows.extend(prompt.iter().cloned());
        let mut idx: Vec<usize> = input.whole_word.iter().map(|&w| w as usize).collect();
        idx.resize(rows.len(), 0);
        let mut x: M = rows
            .iter()
            .enumerate()
            .map(|(p, r)| (0..d).map(|i| (r[i] + ww[idx[p]][i]) * scale + Self::position(p, i, d)).collect())
            .collect();
        for l in 0..self.cfg.n_layers {
            x = self.self_attn(&x, &format!("encoder.{l}.attn_norm"), &format!("encoder.{l}.attn"), false);
            x = self.ffn(&x, &format!("encoder.{l}"));
        }
        let memory = self.norm(&x, "encoder.final_norm");

        let mut dec_in = vec![0u32];
        dec_in.extend_from_slice(&target[..target.len() - 1]);
        let mut y: M = dec_in
            .iter()
            .enumerate()
            .map(|(p, &t)| (0..d).map(|i| tok[t as usize][i] * scale + Self::position(p, i, d)).collect())
            .collect();
        for l in 0..self.cfg.n_layers {
            let pre = format!("decoder.{l}");
            y = self.self_attn(&y, &format!("{pre}.self_norm"), &format!("{pre}.self_attn"), true);
            let h = self.norm(&y, &format!("{pre}.cross_norm"));
            let q = Self::mm(&h, &self.w(&format!("{pre}.cross_attn.q")));
            let k = Self::mm(&memory, &self.w(&format!("{pre}.cross_attn.k")));
            let v = Self::mm(&memory, &self.w(&format!("{pre}.cross_attn.v")));
            let a = self.mha(&q, &k, &v, false);
            y = Self::add(&y, &Self::mm(&a, &self.w(&format!("{pre}.cross_attn.o"))));
            y = self.ffn(&y, &pre);
        }
        let out = self.norm(&y, "decoder.final_norm");
        let logits = Self::mm(&out, &self.w("lm_head"));
        let mut total = 0.0;
        for (row, &t) in logits.iter().zip(target) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            total += -(row[t as usize] - mx - z.ln());
        }
        total / target.len() as f64
    }
}

fn tiny(layers: usize) -> ModelConfig {
    ModelConfig {
        n_layers: layers,
        n_heads: 4,
        d_model: 16,
        d_ff: 24,
        vocab_size: 30,
        max_seq_len: 40,
        n_prompt_per_task: 3,
        n_tasks: 5,
        whole_word_capacity: 5,
        init_std: 0.2,
    }
}

#[test]
fn engine_matches_straight_line_forward() {
    for (layers, seed) in [(1, 1u64), (1, 2), (2, 3)] {
        let cfg = tiny(layers);
        let model = Seq2Seq::<f64>::new(cfg.clone(), seed).unwrap();
        let oracle = Oracle { model: &model, cfg };
        let input = TokenSequence {
            ids: vec![3, 28, 14, 14, 6, 22, 9, 11],
            whole_word: vec![0, 1, 1, 0, 2, 2, 2, 4],
        };
        let target = [12, 25, 7, 1];
        for task in Task::ALL {
            let got = model
                .forward(&Example {
                    task,
                    input: &input,
                    target: &target,
                })
                .unwrap()
                .loss;
            let want = oracle.loss(task, &input, &target);
            assert!((got - want).abs() < 1e-6, "{layers} layers, {task}: {got} vs {want}");
        }
    }
}

#[test]
fn f32_training_precision_tracks_f64() {
    let model = Seq2Seq::<f64>::new(tiny(2), 4).unwrap();
    let single = model.cast::<f32>();
    let input = TokenSequence::plain(vec![5, 6, 7]);
    let ex = Example {
        task: Task::Sequential,
        input: &input,
        target: &[8, 9, 1],
    };
    let a = model.forward(&ex).unwrap().loss;
    let b = single.forward(&ex).unwrap().loss;
    assert!((a - b).abs() < 1e-4, "{a} vs {b}");
}
