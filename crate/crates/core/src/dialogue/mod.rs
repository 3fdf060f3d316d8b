//! Transformer response generator with a user-conditioned style bias.
//!
//! The encoder reads the left-truncated dialogue context; the decoder is
//! teacher-forced during training. Output logits are
//! `W_G q + ℱ(g_u) + b`, where `g_u` mixes latent style embeddings with
//! weights computed from the recommender's intention vector `p_u`.
//!
//! Layers are post-norm (residual then layer normalization without affine
//! terms) with GELU feed-forward blocks and sinusoidal positions.

mod decode;
mod style;

pub use decode::{beam_decode, fill_slots, greedy_decode, Decoded, Generation, NextToken};
pub use style::{
    style_bias, style_vector, style_weights, vocab_distribution, StyleBank, STYLE_F1, STYLE_F1_B, STYLE_F2,
    STYLE_F2_B, STYLE_L, STYLE_WC,
};

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::config::{DecodeStrategy, DialConfig};
use crate::corpus::{Conversation, Speaker, Vocabulary, END, START};
use crate::error::{CcrsError, Result};
use crate::params::{Bound, ParamStore};
use crate::tensor::{glorot, Matrix};

pub const ENC_EMB: &str = "dial.enc_emb";
pub const DEC_EMB: &str = "dial.dec_emb";
pub const ENC_PROJ: &str = "dial.enc_proj";
pub const DEC_PROJ: &str = "dial.dec_proj";
pub const GEN_W: &str = "dial.gen.w";
pub const GEN_B: &str = "dial.gen.b";

const LN_EPS: f64 = 1e-5;
const MASKED: f64 = -1e9;

/// One teacher-forcing example.
#[derive(Clone, Debug, PartialEq)]
pub struct DialSample {
    /// Encoder input (already truncated).
    pub context: Vec<usize>,
    /// Gold response ids without start or end tokens.
    pub response: Vec<usize>,
    /// Mention history before the response turn, `(entity, turn)`.
    pub history: Vec<(usize, usize)>,
}

/// Encoder input for the utterances before `turn`: concatenated tokens,
/// truncated from the left to `max_len`; a lone start token when empty.
pub fn context_ids(conv: &Conversation, turn: usize, vocab: &Vocabulary, max_len: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = conv
        .utterances
        .iter()
        .filter(|u| u.turn < turn)
        .flat_map(|u| vocab.encode(&u.tokens))
        .collect();
    truncate_left(&mut ids, max_len);
    if ids.is_empty() {
        ids.push(START);
    }
    ids
}

pub fn truncate_left(ids: &mut Vec<usize>, max_len: usize) {
    if ids.len() > max_len {
        ids.drain(..ids.len() - max_len);
    }
}

/// Training examples for every gold recommender utterance, with item names
/// expected to be masked already.
pub fn dial_samples(
    conv: &Conversation,
    vocab: &Vocabulary,
    cfg: &DialConfig,
    history: impl Fn(usize) -> Result<Vec<(usize, usize)>>,
) -> Result<Vec<DialSample>> {
    conv.utterances
        .iter()
        .filter(|u| u.speaker == Speaker::Recommender && u.is_gold() && !u.tokens.is_empty())
        .map(|u| {
            let mut response = vocab.encode(&u.tokens);
            response.truncate(cfg.max_seq_len.saturating_sub(1));
            Ok(DialSample { context: context_ids(conv, u.turn, vocab, cfg.max_seq_len), response, history: history(u.turn)? })
        })
        .collect()
}

fn sinusoid(len: usize, d: usize) -> Matrix {
    Array2::from_shape_fn((len, d), |(pos, i)| {
        let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * rate;
        if i % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

fn causal_mask(n: usize) -> Matrix {
    Array2::from_shape_fn((n, n), |(i, j)| if j > i { MASKED } else { 0.0 })
}

/// The dialogue model's static shape; parameters live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct DialModel {
    pub cfg: DialConfig,
    /// Size of `p_u` (the recommender's entity dim).
    pub rec_dim: usize,
    pub vocab: Vocabulary,
}

impl DialModel {
    pub fn new(cfg: DialConfig, rec_dim: usize, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, rec_dim, vocab })
    }

    fn style_hidden(&self) -> usize {
        self.cfg.style_hidden.unwrap_or(2 * self.rec_dim)
    }

    fn projected(&self) -> bool {
        self.cfg.word_dim != self.cfg.model_dim
    }

    /// Every parameter group with its shape; `true` marks zero-initialized biases.
    pub fn shapes(&self) -> Vec<(String, (usize, usize), bool)> {
        let (w, d, f, v) = (self.cfg.word_dim, self.cfg.model_dim, self.cfg.ffn_dim, self.vocab.len());
        let (r, h) = (self.rec_dim, self.style_hidden());
        let mut out: Vec<(String, (usize, usize), bool)> = Vec::new();
        let mut add = |name: String, shape: (usize, usize), zero: bool| out.push((name, shape, zero));
        add(ENC_EMB.into(), (v, w), false);
        add(DEC_EMB.into(), (v, w), false);
        if self.projected() {
            add(ENC_PROJ.into(), (d, w), false);
            add(DEC_PROJ.into(), (d, w), false);
        }
        for l in 0..self.cfg.layers {
            for (pre, blocks) in [(format!("dial.enc{l}"), &["self"][..]), (format!("dial.dec{l}"), &["self", "cross"][..])] {
                for a in blocks {
                    for m in ["wq", "wk", "wv", "wo"] {
                        add(format!("{pre}.{a}.{m}"), (d, d), false);
                    }
                }
                add(format!("{pre}.ff1"), (f, d), false);
                add(format!("{pre}.ff1_b"), (1, f), true);
                add(format!("{pre}.ff2"), (d, f), false);
                add(format!("{pre}.ff2_b"), (1, d), true);
            }
        }
        add(GEN_W.into(), (v, d), false);
        add(GEN_B.into(), (1, v), true);
        add(STYLE_L.into(), (r, self.cfg.n_styles), false);
        add(STYLE_WC.into(), (r, r), false);
        add(STYLE_F1.into(), (h, r), false);
        add(STYLE_F1_B.into(), (1, h), true);
        add(STYLE_F2.into(), (v, h), false);
        add(STYLE_F2_B.into(), (1, v), true);
        out
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamStore {
        let mut p = ParamStore::new();
        for (name, (rows, cols), zero) in self.shapes() {
            p.insert(name, if zero { Array2::zeros((rows, cols)) } else { glorot(rows, cols, rng) });
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        self.shapes().into_iter().map(|s| s.0).collect()
    }

    fn embed<'t>(&self, p: &Bound<'t, '_>, table: &str, proj: &str, ids: &[usize]) -> Var<'t> {
        let mut x = p.get(table).gather_rows(ids);
        if self.projected() {
            x = x.matmul(p.get(proj).t());
        }
        x.add(p.tape().constant(sinusoid(ids.len(), self.cfg.model_dim)))
    }

    fn attention<'t>(
        &self,
        p: &Bound<'t, '_>,
        pre: &str,
        query: Var<'t>,
        memory: Var<'t>,
        mask: Option<Var<'t>>,
    ) -> Var<'t> {
        let k = self.cfg.heads;
        let dh = self.cfg.model_dim / k;
        let q = query.matmul(p.get(&format!("{pre}.wq")).t());
        let kk = memory.matmul(p.get(&format!("{pre}.wk")).t());
        let v = memory.matmul(p.get(&format!("{pre}.wv")).t());
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var<'t>> = (0..k)
            .map(|h| {
                let mut s = q.slice_cols(h * dh, dh).matmul(kk.slice_cols(h * dh, dh).t()).scale(scale);
                if let Some(m) = mask {
                    s = s.add(m);
                }
                s.softmax_rows().matmul(v.slice_cols(h * dh, dh))
            })
            .collect();
        Var::concat_cols(&heads).matmul(p.get(&format!("{pre}.wo")).t())
    }

    fn feed_forward<'t>(p: &Bound<'t, '_>, pre: &str, x: Var<'t>) -> Var<'t> {
        x.matmul(p.get(&format!("{pre}.ff1")).t())
            .add_row(p.get(&format!("{pre}.ff1_b")))
            .gelu()
            .matmul(p.get(&format!("{pre}.ff2")).t())
            .add_row(p.get(&format!("{pre}.ff2_b")))
    }

    /// Encoder states, one row per context position.
    pub fn encode<'t>(&self, p: &Bound<'t, '_>, context: &[usize]) -> Var<'t> {
        let mut ids = if context.is_empty() { vec![START] } else { context.to_vec() };
        truncate_left(&mut ids, self.cfg.max_seq_len);
        let mut x = self.embed(p, ENC_EMB, ENC_PROJ, &ids);
        for l in 0..self.cfg.layers {
            let pre = format!("dial.enc{l}");
            x = x.add(self.attention(p, &format!("{pre}.self"), x, x, None)).layer_norm(LN_EPS);
            x = x.add(Self::feed_forward(p, &pre, x)).layer_norm(LN_EPS);
        }
        x
    }

    /// Decoder states `q` for the input ids (start token first).
    pub fn decode_states<'t>(&self, p: &Bound<'t, '_>, memory: Var<'t>, input: &[usize]) -> Var<'t> {
        let mask = p.tape().constant(causal_mask(input.len()));
        let mut x = self.embed(p, DEC_EMB, DEC_PROJ, input);
        for l in 0..self.cfg.layers {
            let pre = format!("dial.dec{l}");
            x = x.add(self.attention(p, &format!("{pre}.self"), x, x, Some(mask))).layer_norm(LN_EPS);
            x = x.add(self.attention(p, &format!("{pre}.cross"), x, memory, None)).layer_norm(LN_EPS);
            x = x.add(Self::feed_forward(p, &pre, x)).layer_norm(LN_EPS);
        }
        x
    }

    /// `μ^m` as a `1 × n_s` row.
    pub fn style_weights_on_tape<'t>(&self, p: &Bound<'t, '_>, p_u: Var<'t>) -> Var<'t> {
        let scores = p_u.matmul(p.get(STYLE_WC)).matmul(p.get(STYLE_L));
        if self.cfg.style_softmax {
            scores.softmax_rows()
        } else {
            scores
        }
    }

    /// `ℱ(g_u)` as a `1 × |V|` row.
    pub fn style_bias_on_tape<'t>(&self, p: &Bound<'t, '_>, p_u: Var<'t>) -> Var<'t> {
        let g = self.style_weights_on_tape(p, p_u).matmul(p.get(STYLE_L).t());
        g.matmul(p.get(STYLE_F1).t())
            .add_row(p.get(STYLE_F1_B))
            .gelu()
            .matmul(p.get(STYLE_F2).t())
            .add_row(p.get(STYLE_F2_B))
    }

    /// Mean per-token negative log-likelihood of one response under teacher
    /// forcing; `p_u` is `1 × rec_dim`.
    pub fn sample_loss<'t>(&self, p: &Bound<'t, '_>, sample: &DialSample, p_u: Var<'t>) -> Var<'t> {
        let memory = self.encode(p, &sample.context);
        let mut input = vec![START];
        input.extend(&sample.response);
        let mut target = sample.response.clone();
        target.push(END);
        let q = self.decode_states(p, memory, &input);
        let logits = q
            .matmul(p.get(GEN_W).t())
            .add_row(p.get(GEN_B))
            .add_row(self.style_bias_on_tape(p, p_u));
        logits.log_softmax_rows().pick(&target).mean().neg()
    }

    /// Mean over users of the mean sample loss. Each user contributes
    /// `(samples, p_u per sample)`; users without samples are skipped.
    pub fn batch_loss<'t>(&self, p: &Bound<'t, '_>, users: &[(Vec<DialSample>, Vec<Var<'t>>)]) -> Result<Var<'t>> {
        let mut per_user = Vec::new();
        for (samples, intents) in users {
            if samples.is_empty() {
                continue;
            }
            let terms: Vec<Var<'t>> =
                samples.iter().zip(intents).map(|(s, pu)| self.sample_loss(p, s, *pu)).collect();
            per_user.push(Var::concat_rows(&terms).mean());
        }
        if per_user.is_empty() {
            return Err(CcrsError::EmptyInput("no gold responses".into()));
        }
        Ok(Var::concat_rows(&per_user).mean())
    }

    /// Decodes a response for `context`, conditioning the style bias on
    /// `p_u` (`None` disables the bias). `pick_item` fills item slots.
    pub fn generate(
        &self,
        params: &ParamStore,
        context: &[usize],
        p_u: Option<&Array1<f64>>,
        strategy: DecodeStrategy,
        max_len: usize,
        trace: bool,
        pick_item: impl FnMut(&BTreeSet<String>) -> Option<String>,
    ) -> Result<Generation> {
        let session = DecodeSession::new(self, params, context, p_u)?;
        let decoded = match strategy {
            DecodeStrategy::Greedy => greedy_decode(&session, max_len),
            DecodeStrategy::Beam { width, length_alpha } => beam_decode(&session, width, length_alpha, max_len),
        };
        let (tokens, items) = fill_slots(&decoded.ids, &self.vocab, pick_item);
        let top5 = (trace && !decoded.steps.is_empty()).then(|| {
            decoded
                .steps
                .iter()
                .map(|s| s.iter().map(|&(id, p)| (self.vocab.token(id).to_string(), p)).collect())
                .collect()
        });
        Ok(Generation { tokens, items, style_weights: session.style_weights, truncated: decoded.truncated, top5 })
    }
}

/// Per-response decoding state: encoder memory and the fixed style bias.
pub struct DecodeSession<'m> {
    model: &'m DialModel,
    params: &'m ParamStore,
    frozen: BTreeSet<String>,
    memory: Matrix,
    bias: Array1<f64>,
    pub style_weights: Vec<f64>,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m DialModel, params: &'m ParamStore, context: &[usize], p_u: Option<&Array1<f64>>) -> Result<Self> {
        let frozen: BTreeSet<String> = params.names().cloned().collect();
        let tape = Tape::new();
        let p = Bound::new(&tape, params).with_frozen(&frozen);
        let memory = model.encode(&p, context).value();
        let gen_b = params.get(GEN_B)?.row(0).to_owned();
        let (bias, style_weights) = match p_u {
            Some(pu) => {
                let bank = StyleBank::from_params(params)?;
                let mu = style_weights(pu, &bank, model.cfg.style_softmax)?;
                (style_bias(&mu, &bank)? + &gen_b, mu)
            }
            None => (gen_b, Vec::new()),
        };
        Ok(Self { model, params, frozen, memory, bias, style_weights })
    }
}

impl NextToken for DecodeSession<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Vec<f64> {
        let tape = Tape::new();
        let p = Bound::new(&tape, self.params).with_frozen(&self.frozen);
        let mut input = vec![START];
        input.extend(prefix);
        truncate_left(&mut input, self.model.cfg.max_seq_len);
        let q = self.model.decode_states(&p, tape.constant(self.memory.clone()), &input).value();
        let last = q.row(q.nrows() - 1);
        let w_g = self.params.get(GEN_W).expect("generator weights present");
        let logits = w_g.dot(&last) + &self.bias;
        let m = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        logits.iter().map(|x| x - lse).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Utterance, SLOT};
    use crate::gradcheck::assert_gradients;
    use crate::params::Adam;
    use crate::tensor::softmax;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus() -> Vec<Vec<String>> {
        [
            "hi what do you like",
            "i love scary movies",
            "you should watch __item__ it is terrifying",
            "have you seen __item__ it is sweet",
            "thanks a lot",
        ]
        .iter()
        .map(|s| s.split(' ').map(String::from).collect())
        .collect()
    }

    fn small_model(d: usize, v_limit: Option<usize>) -> (DialModel, ParamStore) {
        let c = corpus();
        let mut vocab = Vocabulary::build(c.iter().map(|s| s.as_slice()));
        if let Some(n) = v_limit {
            let toks: Vec<Vec<String>> = vec![vocab.tokens()[5..n].to_vec()];
            vocab = Vocabulary::build(toks.iter().map(|s| s.as_slice()));
        }
        let cfg = DialConfig {
            word_dim: d,
            model_dim: d,
            layers: 1,
            heads: 2,
            ffn_dim: 2 * d,
            max_seq_len: 32,
            n_styles: 3,
            ..DialConfig::default()
        };
        let m = DialModel::new(cfg, 6, vocab).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = m.init_params(&mut rng);
        (m, p)
    }

    fn sample(m: &DialModel, ctx: &str, resp: &str) -> DialSample {
        let t = |s: &str| m.vocab.encode(&s.split(' ').collect::<Vec<_>>());
        DialSample { context: t(ctx), response: t(resp), history: vec![] }
    }

    fn pu(t: &Tape, seed: f64) -> Var<'_> {
        t.constant(Array2::from_shape_fn((1, 6), |(_, j)| (j as f64 * 0.7 + seed).sin()))
    }

    #[test]
    fn encoder_shape_determinism_and_truncation() {
        let (mut m, p) = small_model(8, None);
        let tape = Tape::new();
        let b = Bound::new(&tape, &p);
        let ids = m.vocab.encode(&["i", "love", "scary"]);
        let a = m.encode(&b, &ids).value();
        assert_eq!(a.dim(), (3, 8));
        assert_eq!(a, m.encode(&b, &ids).value());
        assert_eq!(m.encode(&b, &[]).value().nrows(), 1);
        m.cfg.max_seq_len = 2;
        let tail = m.encode(&b, &ids).value();
        let direct = m.encode(&b, &ids[1..]).value();
        assert_eq!(tail, direct);
    }

    #[test]
    fn context_keeps_most_recent_tokens() {
        let (m, _) = small_model(8, None);
        let conv = Conversation {
            conv_id: "c".into(),
            user_id: "u".into(),
            utterances: vec![
                Utterance::new(Speaker::Seeker, 0, "i love scary movies"),
                Utterance::new(Speaker::Recommender, 1, "you should watch __item__"),
            ],
            mentions: vec![],
            targets: vec![],
        };
        assert_eq!(context_ids(&conv, 0, &m.vocab, 10), vec![START]);
        assert_eq!(context_ids(&conv, 1, &m.vocab, 2), m.vocab.encode(&["scary", "movies"]));
        let s = dial_samples(&conv, &m.vocab, &m.cfg, |_| Ok(vec![])).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].response.last(), Some(&SLOT));
    }

    #[test]
    fn tape_style_matches_plain_style() {
        let (m, p) = small_model(8, None);
        let tape = Tape::new();
        let b = Bound::new(&tape, &p);
        let u = pu(&tape, 0.3);
        let bank = StyleBank::from_params(&p).unwrap();
        let mu = style_weights(&u.value().row(0).to_owned(), &bank, true).unwrap();
        let mu_t = m.style_weights_on_tape(&b, u).value();
        let bias = style_bias(&mu, &bank).unwrap();
        let bias_t = m.style_bias_on_tape(&b, u).value();
        for (a, b) in mu.iter().zip(mu_t.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in bias.iter().zip(bias_t.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_closed_forms() {
        let (m, mut p) = small_model(8, None);
        let s = sample(&m, "hi", "thanks a lot");
        for name in [GEN_W, STYLE_F2].iter() {
            p.get_mut(name).unwrap().fill(0.0);
        }
        let tape = Tape::new();
        let loss = m.sample_loss(&Bound::new(&tape, &p), &s, pu(&tape, 0.1)).item();
        assert!((loss - (m.vocab.len() as f64).ln()).abs() < 1e-9);

        // a dominant bias on the right tokens drives the loss to zero
        let (m1, mut p1) = small_model(8, None);
        p1.get_mut(GEN_W).unwrap().fill(0.0);
        p1.get_mut(STYLE_F2).unwrap().fill(0.0);
        let s1 = DialSample { context: vec![START], response: vec![], history: vec![] };
        p1.get_mut(GEN_B).unwrap()[[0, END]] = 1e3;
        let tape = Tape::new();
        let loss = m1.sample_loss(&Bound::new(&tape, &p1), &s1, pu(&tape, 0.1)).item();
        assert!(loss.abs() < 1e-9);

        let tape = Tape::new();
        let b = Bound::new(&tape, &p);
        let a = m.sample_loss(&b, &s, pu(&tape, 0.1)).item();
        let s2 = sample(&m, "hi", "thanks");
        let c = m.sample_loss(&b, &s2, pu(&tape, 0.1)).item();
        let both = m
            .batch_loss(&b, &[(vec![s.clone()], vec![pu(&tape, 0.1)]), (vec![s2], vec![pu(&tape, 0.1)])])
            .unwrap()
            .item();
        assert!((both - (a + c) / 2.0).abs() < 1e-12);
        assert!(m.batch_loss(&b, &[(vec![], vec![])]).is_err());
    }

    #[test]
    fn dial_loss_gradients_match_finite_differences() {
        let (m, p) = small_model(16, Some(20));
        assert_eq!(m.vocab.len(), 20);
        let s = sample(&m, "hi what", "you should __item__");
        let names = [ENC_EMB, DEC_EMB, GEN_W, GEN_B, STYLE_L, STYLE_WC, STYLE_F1, STYLE_F1_B, STYLE_F2, STYLE_F2_B];
        assert_gradients(&p, &names, |b| m.sample_loss(b, &s, pu(b.tape(), 0.4)), 1e-5, 1e-3);
        assert_gradients(
            &p,
            &["dial.enc0.self.wq", "dial.dec0.cross.wv", "dial.dec0.ff1"],
            |b| m.sample_loss(b, &s, pu(b.tape(), 0.4)),
            1e-5,
            1e-3,
        );
    }

    #[test]
    fn overfit_five_sentences() {
        let (m, mut p) = small_model(16, None);
        let c = corpus();
        let samples: Vec<DialSample> = (1..c.len())
            .map(|i| DialSample { context: m.vocab.encode(&c[i - 1]), response: m.vocab.encode(&c[i]), history: vec![] })
            .chain(std::iter::once(DialSample { context: vec![START], response: m.vocab.encode(&c[0]), history: vec![] }))
            .collect();
        let mut adam = Adam::new(3e-3);
        let mut losses = Vec::new();
        for _ in 0..200 {
            let tape = Tape::new();
            let b = Bound::new(&tape, &p);
            let intents = samples.iter().map(|_| pu(&tape, 0.2)).collect();
            let loss = m.batch_loss(&b, &[(samples.clone(), intents)]).unwrap();
            losses.push(loss.item());
            let g = tape.backward(loss);
            adam.update(&mut p, &g);
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "loss rose: {} -> {}", w[0], w[1]);
        }
        assert!(losses[199] < 0.1 * losses[0]);
    }

    #[test]
    fn decode_distribution_and_baseline() {
        let (m, mut p) = small_model(8, None);
        let ctx = m.vocab.encode(&["i", "love", "scary", "movies"]);
        let u = Array1::from_shape_fn(6, |j| (j as f64).cos());
        let session = DecodeSession::new(&m, &p, &ctx, Some(&u)).unwrap();
        let lp = session.next_log_probs(&[3, 7]);
        assert!((lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-6);
        assert!((session.style_weights.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        // the tape route and the session agree on the next-token distribution
        let tape = Tape::new();
        let b = Bound::new(&tape, &p);
        let mem = m.encode(&b, &ctx);
        let q = m.decode_states(&b, mem, &[START, 3, 7]).value();
        let bias = m.style_bias_on_tape(&b, tape.constant(u.clone().insert_axis(ndarray::Axis(0)))).value();
        let logits = p.get(GEN_W).unwrap().dot(&q.row(2)) + bias.row(0) + p.get(GEN_B).unwrap().row(0);
        for (a, b) in softmax(&logits.to_vec()).iter().zip(&lp) {
            assert!((a - b.exp()).abs() < 1e-12);
        }

        p.get_mut(STYLE_L).unwrap().fill(0.0);
        p.get_mut(STYLE_F2).unwrap().fill(0.0);
        let styled = m.generate(&p, &ctx, Some(&u), DecodeStrategy::Greedy, 8, false, |_| None).unwrap();
        let plain = m.generate(&p, &ctx, None, DecodeStrategy::Greedy, 8, false, |_| None).unwrap();
        assert_eq!(styled.tokens, plain.tokens);
        let again = m.generate(&p, &ctx, Some(&u), DecodeStrategy::Greedy, 8, true, |_| None).unwrap();
        assert_eq!(again.tokens, styled.tokens);
        assert!(again.top5.is_some());
    }
}
