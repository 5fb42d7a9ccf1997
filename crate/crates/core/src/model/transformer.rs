//! Pre-norm encoder-decoder transformer with per-task prompt vectors and
//! whole-word embeddings.
//!
//! Encoder input for a task: the token embeddings of the rendered template
//! followed by that task's prompt vectors, plus a whole-word embedding per
//! position (prompt positions use row 0), scaled by `sqrt(d_model)`, plus
//! fixed sinusoidal positions. The decoder shares the token table and is
//! fed the target shifted right behind a `<pad>` start token.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::task::Task;
use crate::textcodec::{TokenSequence, PAD};

use super::config::ModelConfig;
use super::matrix::Matrix;
use super::scalar::Scalar;
use super::tape::{Gradients, ParamId, ParamStore, Tape, Var};
use super::ModelError;

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Ffn {
    w_in: ParamId,
    w_out: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn_norm: Norm,
    attn: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    self_norm: Norm,
    self_attn: Attn,
    cross_norm: Norm,
    cross_attn: Attn,
    ffn_norm: Norm,
    ffn: Ffn,
}

#[derive(Debug, Clone)]
struct Layout {
    token_embed: ParamId,
    whole_word_embed: ParamId,
    prompts: Vec<ParamId>,
    encoder: Vec<EncoderLayer>,
    encoder_norm: Norm,
    decoder: Vec<DecoderLayer>,
    decoder_norm: Norm,
    lm_head: ParamId,
}

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Canonical parameter name of a task's prompt block.
pub fn prompt_param_name(task: Task) -> String {
    format!("prompt.{}", task.tag())
}

fn build_layout<T: Scalar>(
    cfg: &ModelConfig,
    mut make: impl FnMut(&str, usize, usize, Init) -> Result<Matrix<T>, ModelError>,
) -> Result<(ParamStore<T>, Layout), ModelError> {
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let mut add = |store: &mut ParamStore<T>, name: String, r: usize, c: usize, init: Init| {
        let m = make(&name, r, c, init)?;
        if m.shape() != (r, c) {
            return Err(ModelError::Config(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                m.shape(),
                (r, c)
            )));
        }
        Ok::<ParamId, ModelError>(store.insert(name, m))
    };
    macro_rules! p {
        ($name:expr, $r:expr, $c:expr, $init:expr) => {
            add(&mut store, $name, $r, $c, $init)?
        };
    }
    let norm = |store: &mut ParamStore<T>,
                add: &mut dyn FnMut(&mut ParamStore<T>, String, usize, usize, Init) -> Result<ParamId, ModelError>,
                prefix: &str| {
        Ok::<Norm, ModelError>(Norm {
            gain: add(store, format!("{prefix}.gain"), 1, d, Init::Ones)?,
            bias: add(store, format!("{prefix}.bias"), 1, d, Init::Zeros)?,
        })
    };

    let token_embed = p!("embed.token".into(), cfg.vocab_size, d, Init::Normal);
    let whole_word_embed = p!("embed.whole_word".into(), cfg.whole_word_capacity, d, Init::Normal);
    let mut prompts = Vec::with_capacity(Task::COUNT);
    for task in Task::ALL {
        prompts.push(p!(prompt_param_name(task), cfg.n_prompt_per_task, d, Init::Normal));
    }

    let mut encoder = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let pre = format!("encoder.{l}");
        let attn_norm = norm(&mut store, &mut add, &format!("{pre}.attn_norm"))?;
        let attn = Attn {
            q: p!(format!("{pre}.attn.q"), d, d, Init::Normal),
            k: p!(format!("{pre}.attn.k"), d, d, Init::Normal),
            v: p!(format!("{pre}.attn.v"), d, d, Init::Normal),
            o: p!(format!("{pre}.attn.o"), d, d, Init::Normal),
        };
        let ffn_norm = norm(&mut store, &mut add, &format!("{pre}.ffn_norm"))?;
        let ffn = Ffn {
            w_in: p!(format!("{pre}.ffn.in"), d, cfg.d_ff, Init::Normal),
            w_out: p!(format!("{pre}.ffn.out"), cfg.d_ff, d, Init::Normal),
        };
        encoder.push(EncoderLayer {
            attn_norm,
            attn,
            ffn_norm,
            ffn,
        });
    }
    let encoder_norm = norm(&mut store, &mut add, "encoder.final_norm")?;

    let mut decoder = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let pre = format!("decoder.{l}");
        let self_norm = norm(&mut store, &mut add, &format!("{pre}.self_norm"))?;
        let self_attn = Attn {
            q: p!(format!("{pre}.self_attn.q"), d, d, Init::Normal),
            k: p!(format!("{pre}.self_attn.k"), d, d, Init::Normal),
            v: p!(format!("{pre}.self_attn.v"), d, d, Init::Normal),
            o: p!(format!("{pre}.self_attn.o"), d, d, Init::Normal),
        };
        let cross_norm = norm(&mut store, &mut add, &format!("{pre}.cross_norm"))?;
        let cross_attn = Attn {
            q: p!(format!("{pre}.cross_attn.q"), d, d, Init::Normal),
            k: p!(format!("{pre}.cross_attn.k"), d, d, Init::Normal),
            v: p!(format!("{pre}.cross_attn.v"), d, d, Init::Normal),
            o: p!(format!("{pre}.cross_attn.o"), d, d, Init::Normal),
        };
        let ffn_norm = norm(&mut store, &mut add, &format!("{pre}.ffn_norm"))?;
        let ffn = Ffn {
            w_in: p!(format!("{pre}.ffn.in"), d, cfg.d_ff, Init::Normal),
            w_out: p!(format!("{pre}.ffn.out"), cfg.d_ff, d, Init::Normal),
        };
        decoder.push(DecoderLayer {
            self_norm,
            self_attn,
            cross_norm,
            cross_attn,
            ffn_norm,
            ffn,
        });
    }
    let decoder_norm = norm(&mut store, &mut add, "decoder.final_norm")?;
    let lm_head = p!("lm_head".into(), d, cfg.vocab_size, Init::Normal);

    Ok((
        store,
        Layout {
            token_embed,
            whole_word_embed,
            prompts,
            encoder,
            encoder_norm,
            decoder,
            decoder_norm,
            lm_head,
        },
    ))
}

/// Fixed sinusoidal position table.
fn sinusoidal<T: Scalar>(len: usize, d: usize) -> Matrix<T> {
    Matrix::from_fn(len, d, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / d as f64);
        T::lit(if i % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Encoder output plus the per-layer cross-attention keys and values, so a
/// decoder can be run many times against one encoding.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub memory: Var,
    cross: Vec<(Var, Var)>,
}

/// One supervised pair.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub task: Task,
    pub input: &'a TokenSequence,
    /// Target ids, EOS-terminated.
    pub target: &'a [u32],
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `target_len x vocab_size`.
    pub logits: Matrix<T>,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    /// Mean of the per-sample mean token losses.
    pub loss: f64,
    pub per_sample: Vec<f64>,
    pub grads: Gradients<T>,
}

#[derive(Debug, Clone)]
pub struct Seq2Seq<T: Scalar> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    positions: Matrix<T>,
}

impl<T: Scalar> Seq2Seq<T> {
    /// Embeddings and projections ~ N(0, init_std); norms start at gain 1,
    /// bias 0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| ModelError::Config(e.to_string()))?;
        let (params, layout) = build_layout(&config, |_, r, c, init| {
            Ok(match init {
                Init::Normal => Matrix::from_fn(r, c, |_, _| T::lit(normal.sample(&mut rng))),
                Init::Ones => Matrix::filled(r, c, T::one()),
                Init::Zeros => Matrix::zeros(r, c),
            })
        })?;
        Ok(Self::assemble(config, params, layout))
    }

    /// Rebuilds a model from named tensors, e.g. a loaded checkpoint.
    pub fn from_tensors(
        config: ModelConfig,
        mut fetch: impl FnMut(&str) -> Option<Matrix<T>>,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, layout) = build_layout(&config, |name, _, _, _| {
            fetch(name).ok_or_else(|| ModelError::Config(format!("missing tensor {name}")))
        })?;
        Ok(Self::assemble(config, params, layout))
    }

    fn assemble(config: ModelConfig, params: ParamStore<T>, layout: Layout) -> Self {
        let positions = sinusoidal(config.max_seq_len, config.d_model);
        Self {
            config,
            params,
            layout,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn prompt_param(&self, task: Task) -> ParamId {
        self.layout.prompts[task.index()]
    }

    pub fn cast<U: Scalar>(&self) -> Seq2Seq<U> {
        Seq2Seq::from_tensors(self.config.clone(), |name| self.params.get(name).map(Matrix::cast))
            .expect("same layout")
    }

    fn check_input(&self, input: &TokenSequence) -> Result<(), ModelError> {
        let cfg = &self.config;
        if input.whole_word.len() != input.ids.len() {
            return Err(ModelError::Shape(format!(
                "{} token ids but {} whole-word indices",
                input.ids.len(),
                input.whole_word.len()
            )));
        }
        let len = input.ids.len() + cfg.n_prompt_per_task;
        if len > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len,
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = input.ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        if let Some(&w) = input.whole_word.iter().find(|&&w| w as usize >= cfg.whole_word_capacity) {
            return Err(ModelError::WholeWordOutOfRange {
                index: w,
                capacity: cfg.whole_word_capacity,
            });
        }
        Ok(())
    }

    /// Encoder input representation: `|X| + n_prompt` rows of width `d_model`.
    pub fn embed_input(&self, tape: &mut Tape<'_, T>, input: &TokenSequence, task: Task) -> Result<Var, ModelError> {
        self.check_input(input)?;
        let n_prompt = self.config.n_prompt_per_task;
        let ids: Vec<usize> = input.ids.iter().map(|&i| i as usize).collect();
        let table = tape.param(self.layout.token_embed);
        let tokens = tape.gather(table, &ids);
        let prompt = tape.param(self.layout.prompts[task.index()]);
        let x = tape.concat_rows(tokens, prompt);

        let mut ww: Vec<usize> = input.whole_word.iter().map(|&w| w as usize).collect();
        ww.extend(std::iter::repeat_n(0, n_prompt));
        let ww_table = tape.param(self.layout.whole_word_embed);
        let ww = tape.gather(ww_table, &ww);
        let x = tape.add(x, ww);
        let x = tape.scale(x, T::lit((self.config.d_model as f64).sqrt()));
        let pe = tape.constant(self.positions.slice_rows(0, ids.len() + n_prompt));
        Ok(tape.add(x, pe))
    }

    fn attention_block(&self, tape: &mut Tape<'_, T>, x: Var, norm: Norm, attn: Attn, causal: bool) -> Var {
        let h = self.norm(tape, x, norm);
        let (wq, wk, wv, wo) = (
            tape.param(attn.q),
            tape.param(attn.k),
            tape.param(attn.v),
            tape.param(attn.o),
        );
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let a = tape.attention(q, k, v, self.config.n_heads, causal);
        let o = tape.matmul(a, wo);
        tape.add(x, o)
    }

    fn ffn_block(&self, tape: &mut Tape<'_, T>, x: Var, norm: Norm, ffn: Ffn) -> Var {
        let h = self.norm(tape, x, norm);
        let w_in = tape.param(ffn.w_in);
        let w_out = tape.param(ffn.w_out);
        let u = tape.matmul(h, w_in);
        let u = tape.gelu(u);
        let f = tape.matmul(u, w_out);
        tape.add(x, f)
    }

    fn norm(&self, tape: &mut Tape<'_, T>, x: Var, norm: Norm) -> Var {
        let g = tape.param(norm.gain);
        let b = tape.param(norm.bias);
        tape.layer_norm(x, g, b)
    }

    fn ensure_finite(tape: &Tape<'_, T>, v: Var, layer: impl FnOnce() -> String) -> Result<(), ModelError> {
        if tape.value(v).all_finite() {
            Ok(())
        } else {
            Err(ModelError::NonFinite { layer: layer() })
        }
    }

    pub fn encode(&self, tape: &mut Tape<'_, T>, input: &TokenSequence, task: Task) -> Result<Encoded, ModelError> {
        let mut x = self.embed_input(tape, input, task)?;
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            x = self.attention_block(tape, x, layer.attn_norm, layer.attn, false);
            x = self.ffn_block(tape, x, layer.ffn_norm, layer.ffn);
            Self::ensure_finite(tape, x, || format!("encoder.{l}"))?;
        }
        let memory = self.norm(tape, x, self.layout.encoder_norm);
        let cross = self
            .layout
            .decoder
            .iter()
            .map(|layer| {
                let wk = tape.param(layer.cross_attn.k);
                let wv = tape.param(layer.cross_attn.v);
                (tape.matmul(memory, wk), tape.matmul(memory, wv))
            })
            .collect();
        Ok(Encoded { memory, cross })
    }

    /// Logits (`len(decoder_input) x vocab_size`) for a decoder input that
    /// starts with the `<pad>` start token.
    pub fn decode(&self, tape: &mut Tape<'_, T>, enc: &Encoded, decoder_input: &[u32]) -> Result<Var, ModelError> {
        let cfg = &self.config;
        if decoder_input.len() > cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: decoder_input.len(),
                max: cfg.max_seq_len,
            });
        }
        if let Some(&id) = decoder_input.iter().find(|&&id| id as usize >= cfg.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: cfg.vocab_size,
            });
        }
        let ids: Vec<usize> = decoder_input.iter().map(|&i| i as usize).collect();
        let table = tape.param(self.layout.token_embed);
        let y = tape.gather(table, &ids);
        let y = tape.scale(y, T::lit((cfg.d_model as f64).sqrt()));
        let pe = tape.constant(self.positions.slice_rows(0, ids.len()));
        let mut y = tape.add(y, pe);
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            y = self.attention_block(tape, y, layer.self_norm, layer.self_attn, true);

            let h = self.norm(tape, y, layer.cross_norm);
            let wq = tape.param(layer.cross_attn.q);
            let q = tape.matmul(h, wq);
            let (k, v) = enc.cross[l];
            let a = tape.attention(q, k, v, cfg.n_heads, false);
            let wo = tape.param(layer.cross_attn.o);
            let o = tape.matmul(a, wo);
            y = tape.add(y, o);

            y = self.ffn_block(tape, y, layer.ffn_norm, layer.ffn);
            Self::ensure_finite(tape, y, || format!("decoder.{l}"))?;
        }
        let out = self.norm(tape, y, self.layout.decoder_norm);
        let head = tape.param(self.layout.lm_head);
        let logits = tape.matmul(out, head);
        Self::ensure_finite(tape, logits, || "lm_head".to_string())?;
        Ok(logits)
    }

    /// Teacher-forced decoder input: `<pad>` followed by all but the last
    /// target id.
    pub fn shift_right(target: &[u32]) -> Vec<u32> {
        let mut dec = Vec::with_capacity(target.len());
        dec.push(PAD);
        dec.extend_from_slice(&target[..target.len().saturating_sub(1)]);
        dec
    }

    /// Records the mean token loss of one example; returns (logits, loss).
    pub fn loss_on(&self, tape: &mut Tape<'_, T>, ex: &Example<'_>) -> Result<(Var, Var), ModelError> {
        if ex.target.is_empty() {
            return Err(ModelError::EmptyTarget);
        }
        let enc = self.encode(tape, ex.input, ex.task)?;
        let logits = self.decode(tape, &enc, &Self::shift_right(ex.target))?;
        let targets: Vec<Option<usize>> = ex
            .target
            .iter()
            .map(|&t| (t != PAD).then_some(t as usize))
            .collect();
        let loss = tape.cross_entropy(logits, &targets);
        Ok((logits, loss))
    }

    pub fn forward(&self, ex: &Example<'_>) -> Result<ForwardOutput<T>, ModelError> {
        let mut tape = Tape::inference(&self.params);
        let (logits, loss) = self.loss_on(&mut tape, ex)?;
        Ok(ForwardOutput {
            logits: tape.value(logits).clone(),
            loss: tape.value(loss).get(0, 0).as_f64(),
        })
    }

    /// Mean loss over `batch` and its gradient. Each sample is weighted
    /// `1 / batch.len()`, so the result is the mean of per-sample means.
    pub fn forward_backward(&self, batch: &[Example<'_>]) -> Result<BatchGrad<T>, ModelError> {
        let mut grads = Gradients::for_store(&self.params);
        let mut per_sample = Vec::with_capacity(batch.len());
        if batch.is_empty() {
            return Ok(BatchGrad {
                loss: 0.0,
                per_sample,
                grads,
            });
        }
        let weight = T::one() / T::lit(batch.len() as f64);
        for ex in batch {
            let mut tape = Tape::recording(&self.params);
            let (_, loss) = self.loss_on(&mut tape, ex)?;
            let value = tape.value(loss).get(0, 0).as_f64();
            if !value.is_finite() {
                return Err(ModelError::NonFinite {
                    layer: "loss".to_string(),
                });
            }
            per_sample.push(value);
            tape.backward(loss, weight, &mut grads)?;
        }
        let loss = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        Ok(BatchGrad {
            loss,
            per_sample,
            grads,
        })
    }
}
