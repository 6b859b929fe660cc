//! Small bidirectional transformer encoder used as the pretrained base:
//! hashing tokenizer, weights, batched forward pass, a masked-token plus
//! intact-vs-shuffled pretraining loop, and the `HSW1` weights file.
//!
//! Weights file layout (all little-endian):
//!
//! ```text
//! b"HSW1"
//! u32 vocab, u32 dim, u32 max_len, u32 blocks, u32 heads
//! f64 × n   every parameter tensor, row-major, in declaration order
//! ```
//!
//! Declaration order: token embeddings `[V,E]`, position embeddings
//! `[max_len,E]`, then per block `ln1.gain, ln1.bias, attn.qkv.w [E,3E],
//! attn.qkv.b, attn.out.w [E,E], attn.out.b, ln2.gain, ln2.bias,
//! ff1.w [E,2E], ff1.b, ff2.w [2E,E], ff2.b`, then the final layer norm,
//! the masked-token projection `[E,V]` + bias and the sequence projection
//! `[E,2]` + bias.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, lr_at, AdamState, Dense, EncoderBlock, Graph, LayerNormParams, ParamId, ParamStore,
    ScheduleSpec, SeqLayout, Tensor, Var,
};
use crate::searchspace::PoolingKind;

pub const CLS: u32 = 0;
pub const PAD: u32 = 1;
pub const MASK: u32 = 2;
/// First id available to ordinary tokens.
pub const FIRST_TOKEN: u32 = 3;

const MAGIC: &[u8; 4] = b"HSW1";

/// Lowercases, splits on whitespace and hashes each word (FNV-1a) into
/// `[FIRST_TOKEN, vocab_size)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            max_len: 32,
        }
    }
}

impl Tokenizer {
    pub fn token_id(&self, word: &str) -> u32 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.to_lowercase().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let span = (self.vocab_size as u64) - FIRST_TOKEN as u64;
        FIRST_TOKEN + (h % span) as u32
    }

    /// `[CLS, w1, w2, …, PAD, PAD]`, truncated and padded to `max_len`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::with_capacity(self.max_len);
        ids.push(CLS);
        ids.extend(
            text.split_whitespace()
                .take(self.max_len.saturating_sub(1))
                .map(|w| self.token_id(w)),
        );
        ids.resize(self.max_len, PAD);
        ids
    }
}

/// Length of the non-PAD prefix.
pub fn valid_len(ids: &[u32]) -> usize {
    ids.iter().position(|&t| t == PAD).unwrap_or(ids.len())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub vocab: usize,
    pub dim: usize,
    pub max_len: usize,
    pub blocks: usize,
    pub heads: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            vocab: 256,
            dim: 32,
            max_len: 32,
            blocks: 2,
            heads: 4,
        }
    }
}

/// A batch of CLS-prefixed id sequences, trimmed to the longest valid
/// prefix in the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub layout: Arc<SeqLayout>,
}

impl TokenBatch {
    pub fn new<S: AsRef<[u32]>>(seqs: &[S], max_len: usize) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::precondition("encode_sequence", "empty batch"));
        }
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(Error::precondition("encode_sequence", "empty sequence"));
            }
            if s[0] != CLS {
                return Err(Error::precondition(
                    "encode_sequence",
                    format!("sequence must start with CLS ({CLS}), found {}", s[0]),
                ));
            }
            if s.len() > max_len {
                return Err(Error::precondition(
                    "encode_sequence",
                    format!("sequence of {} ids exceeds max_len {max_len}", s.len()),
                ));
            }
            lengths.push(valid_len(s));
        }
        let len = *lengths.iter().max().expect("non-empty");
        let mut ids = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            let s = s.as_ref();
            ids.extend((0..len).map(|t| s.get(t).copied().unwrap_or(PAD) as usize));
        }
        let layout = Arc::new(SeqLayout::new(seqs.len(), len, lengths)?);
        Ok(Self { ids, layout })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    dims: EncoderDims,
    store: ParamStore,
    token_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<EncoderBlock>,
    final_ln: LayerNormParams,
    mlm_head: Dense,
    seq_head: Dense,
    frozen: bool,
}

impl EncoderWeights {
    pub fn init(dims: EncoderDims, rng: &mut impl Rng) -> Result<Self> {
        if dims.dim == 0 || dims.max_len == 0 || dims.vocab <= FIRST_TOKEN as usize {
            return Err(Error::precondition("encoder", format!("degenerate dims {dims:?}")));
        }
        let e = dims.dim;
        let mut store = ParamStore::new();
        let token_emb = store.register("token_emb", Tensor::uniform(&[dims.vocab, e], 0.1, rng));
        let pos_emb = store.register("pos_emb", Tensor::uniform(&[dims.max_len, e], 0.1, rng));
        let blocks = (0..dims.blocks)
            .map(|i| EncoderBlock::new(&mut store, &format!("block{i}"), e, dims.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let final_ln = LayerNormParams::new(&mut store, "final_ln", e);
        let mlm_head = Dense::new(&mut store, "mlm", e, dims.vocab, rng);
        let seq_head = Dense::new(&mut store, "seq", e, 2, rng);
        Ok(Self {
            dims,
            store,
            token_emb,
            pos_emb,
            blocks,
            final_ln,
            mlm_head,
            seq_head,
            frozen: false,
        })
    }

    pub fn dims(&self) -> EncoderDims {
        self.dims
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Scalar parameter count, pretraining projections included.
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    /// When frozen, the parameters enter graphs as constants, so no
    /// gradient reaches them and optimizer steps leave them untouched.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.store.set_requires_grad(!frozen);
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        g.bind(&self.store)
    }

    /// Contextual embeddings `[batch·len, dim]` after the final layer norm.
    /// PAD keys are excluded from attention.
    pub fn forward(&self, g: &mut Graph, p: &[Var], batch: &TokenBatch) -> Result<Var> {
        let layout = &batch.layout;
        let tok = g.embedding(p[self.token_emb.index()], &batch.ids)?;
        let positions: Vec<usize> = (0..layout.batch).flat_map(|_| 0..layout.len).collect();
        let pos = g.embedding(p[self.pos_emb.index()], &positions)?;
        let mut x = g.add(tok, pos)?;
        for block in &self.blocks {
            x = block.forward(g, p, x, layout)?;
        }
        self.final_ln.forward(g, p, x)
    }

    /// Embeddings `[T, dim]` for one CLS-prefixed sequence, PAD rows
    /// included.
    pub fn encode_sequence(&self, ids: &[u32]) -> Result<Tensor> {
        let checked = TokenBatch::new(&[ids], self.dims.max_len)?;
        let batch = TokenBatch {
            ids: ids.iter().map(|&i| i as usize).collect(),
            layout: Arc::new(SeqLayout::new(1, ids.len(), checked.layout.lengths.clone())?),
        };
        let mut g = Graph::new();
        let p = self.bind(&mut g);
        let out = self.forward(&mut g, &p, &batch)?;
        Ok(g.to_tensor(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(24 + self.param_count() * 8);
        buf.extend_from_slice(MAGIC);
        for d in [
            self.dims.vocab,
            self.dims.dim,
            self.dims.max_len,
            self.dims.blocks,
            self.dims.heads,
        ] {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for t in self.store.tensors() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let bad = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(bad("missing HSW1 header".into()));
        }
        let word = |i: usize| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        };
        let dims = EncoderDims {
            vocab: word(0),
            dim: word(1),
            max_len: word(2),
            blocks: word(3),
            heads: word(4),
        };
        let mut weights = Self::init(dims, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| bad(format!("bad dims {dims:?}: {e}")))?;
        let expected = 24 + weights.param_count() * 8;
        if bytes.len() != expected {
            return Err(bad(format!(
                "expected {expected} bytes for dims {dims:?}, found {}",
                bytes.len()
            )));
        }
        let mut chunks = bytes[24..].chunks_exact(8);
        for t in weights.store.tensors_mut() {
            for v in t.data_mut() {
                *v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().expect("8 bytes"));
            }
        }
        if !weights.store.tensors().iter().all(Tensor::is_finite) {
            return Err(bad("non-finite parameter".into()));
        }
        Ok(weights)
    }
}

/// Source of unlabeled pretraining sequences: a sparse first-order Markov
/// chain over the content vocabulary, so both the masked-token and the
/// order objectives carry signal.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub first_token: u32,
    pub tokens: u32,
    pub min_len: usize,
    pub max_len: usize,
    successors: Vec<[u32; 3]>,
}

impl SyntheticCorpus {
    /// Corpus over ids `first_token..first_token + tokens`, content length
    /// uniform in `min_len..=max_len`.
    pub fn new(first_token: u32, tokens: u32, min_len: usize, max_len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let successors = (0..tokens)
            .map(|_| {
                [
                    rng.random_range(0..tokens),
                    rng.random_range(0..tokens),
                    rng.random_range(0..tokens),
                ]
            })
            .collect();
        Self {
            first_token,
            tokens,
            min_len,
            max_len,
            successors,
        }
    }

    /// The corpus matched to the synthetic task vocabulary.
    pub fn standard(seed: u64) -> Self {
        Self::new(FIRST_TOKEN, crate::tasks::CONTENT_TOKENS, 16, 31, seed)
    }

    /// Content ids only (no CLS/PAD).
    pub fn sample_content(&self, rng: &mut impl Rng) -> Vec<u32> {
        let n = rng.random_range(self.min_len..=self.max_len);
        let mut cur = rng.random_range(0..self.tokens);
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.first_token + cur);
            let r: f64 = rng.random();
            cur = if r < 0.85 {
                self.successors[cur as usize][rng.random_range(0..3)]
            } else {
                rng.random_range(0..self.tokens)
            };
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSettings {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub mask_prob: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 3e-3,
            warmup_frac: 0.1,
            mask_prob: 0.15,
        }
    }
}

/// Held-out metrics before and after pretraining.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_mlm_loss: f64,
    pub final_mlm_loss: f64,
    pub initial_order_acc: f64,
    pub final_order_acc: f64,
}

/// Fixed evaluation batch for the pretraining objectives.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub inputs: Vec<Vec<u32>>,
    /// `(row in flattened batch, original id)` for masked positions.
    pub masked: Vec<(usize, usize)>,
    /// 1 = intact, 0 = shuffled.
    pub order_labels: Vec<usize>,
}

impl PretrainBatch {
    pub fn draw(corpus: &SyntheticCorpus, n: usize, mask_prob: f64, max_len: usize, rng: &mut impl Rng) -> Self {
        let mut inputs = Vec::with_capacity(n);
        let mut order_labels = Vec::with_capacity(n);
        let mut raw = Vec::with_capacity(n);
        for _ in 0..n {
            let mut content = corpus.sample_content(rng);
            content.truncate(max_len - 1);
            let intact = rng.random_bool(0.5);
            if !intact {
                content.shuffle(rng);
            }
            order_labels.push(intact as usize);
            let mut ids = vec![CLS];
            ids.extend_from_slice(&content);
            raw.push(ids);
        }
        let len = raw.iter().map(Vec::len).max().unwrap_or(1);
        let mut masked = Vec::new();
        for (b, ids) in raw.into_iter().enumerate() {
            let mut input = ids.clone();
            for t in 1..ids.len() {
                if rng.random_bool(mask_prob) {
                    input[t] = MASK;
                    masked.push((b * len + t, ids[t] as usize));
                }
            }
            inputs.push(input);
        }
        if masked.is_empty() {
            masked.push((1, inputs[0][1] as usize));
            inputs[0][1] = MASK;
        }
        Self {
            inputs,
            masked,
            order_labels,
        }
    }
}

impl EncoderWeights {
    /// `(masked-token loss, order loss, order accuracy)` on a batch.
    fn pretrain_losses(&self, g: &mut Graph, p: &[Var], batch: &PretrainBatch) -> Result<(Var, Var, f64)> {
        let tb = TokenBatch::new(&batch.inputs, self.dims.max_len)?;
        let h = self.forward(g, p, &tb)?;
        let rows: Vec<usize> = batch.masked.iter().map(|m| m.0).collect();
        let targets: Vec<usize> = batch.masked.iter().map(|m| m.1).collect();
        let hm = g.gather_rows(h, &rows)?;
        let logits = self.mlm_head.forward(g, p, hm)?;
        let mlm = g.softmax_cross_entropy(logits, &targets)?;
        let cls = g.pool(h, PoolingKind::Cls, &tb.layout)?;
        let order_logits = self.seq_head.forward(g, p, cls)?;
        let order = g.softmax_cross_entropy(order_logits, &batch.order_labels)?;
        let acc = g
            .value(order_logits)
            .chunks_exact(2)
            .zip(&batch.order_labels)
            .filter(|(l, &y)| ((l[1] > l[0]) as usize) == y)
            .count() as f64
            / batch.order_labels.len() as f64;
        Ok((mlm, order, acc))
    }

    /// Held-out `(masked-token loss, intact-vs-shuffled accuracy)`.
    pub fn pretrain_metrics(&self, batch: &PretrainBatch) -> Result<(f64, f64)> {
        let mut g = Graph::new();
        let mut frozen = self.store.clone();
        frozen.set_requires_grad(false);
        let p = g.bind(&frozen);
        let (mlm, _, acc) = self.pretrain_losses(&mut g, &p, batch)?;
        Ok((g.value(mlm)[0], acc))
    }
}

/// Trains fresh weights on the joint masked-token + intact/shuffled
/// objective.
pub fn pretrain(
    corpus: &SyntheticCorpus,
    dims: EncoderDims,
    settings: &PretrainSettings,
    rng: &mut impl Rng,
) -> Result<(EncoderWeights, PretrainReport)> {
    if settings.steps == 0 {
        return Err(Error::precondition("pretrain", "steps must be at least 1"));
    }
    let mut weights = EncoderWeights::init(dims, rng)?;
    let heldout = PretrainBatch::draw(corpus, 256, settings.mask_prob, dims.max_len, rng);
    let (initial_mlm_loss, initial_order_acc) = weights.pretrain_metrics(&heldout)?;
    let schedule = ScheduleSpec::with_warmup_fraction(settings.lr, settings.steps, settings.warmup_frac)?;
    let mut adam = AdamState::new(&weights.store);
    for step in 0..settings.steps {
        let batch = PretrainBatch::draw(corpus, settings.batch_size, settings.mask_prob, dims.max_len, rng);
        let mut g = Graph::new();
        let p = weights.bind(&mut g);
        let (mlm, order, _) = weights.pretrain_losses(&mut g, &p, &batch)?;
        let loss = g.add(mlm, order)?;
        g.backward(loss)?;
        weights.store.zero_grads();
        g.collect_grads(&p, &mut weights.store);
        adam_step(&mut weights.store, &mut adam, lr_at(step, &schedule))?;
        if step % 500 == 0 {
            log::debug!(
                "pretrain step {step}: mlm {:.4} order {:.4}",
                g.value(mlm)[0],
                g.value(order)[0]
            );
        }
    }
    weights.store.zero_grads();
    let (final_mlm_loss, final_order_acc) = weights.pretrain_metrics(&heldout)?;
    log::info!(
        "pretrain done: held-out mlm loss {initial_mlm_loss:.4} -> {final_mlm_loss:.4}, \
         order acc {initial_order_acc:.3} -> {final_order_acc:.3}"
    );
    Ok((
        weights,
        PretrainReport {
            initial_mlm_loss,
            final_mlm_loss,
            initial_order_acc,
            final_order_acc,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> EncoderWeights {
        EncoderWeights::init(EncoderDims::default(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap()
    }

    #[test]
    fn tokenizer_is_deterministic_and_padded() {
        let tok = Tokenizer::default();
        let a = tok.encode("The cat sat");
        assert_eq!(a, tok.encode("the CAT   sat"));
        assert_eq!(a.len(), 32);
        assert_eq!(a[0], CLS);
        assert!(a[1..4].iter().all(|&t| (FIRST_TOKEN..256).contains(&t)));
        assert!(a[4..].iter().all(|&t| t == PAD));
        let long = vec!["w"; 100].join(" ");
        assert_eq!(tok.encode(&long).len(), 32);
    }

    #[test]
    fn encode_sequence_rejects_bad_input() {
        let w = tiny();
        assert!(w.encode_sequence(&[5, 6]).is_err());
        assert!(w.encode_sequence(&[]).is_err());
        assert!(w.encode_sequence(&[CLS; 33]).is_err());
    }

    #[test]
    fn padding_does_not_change_cls_row() {
        let w = tiny();
        let short = w.encode_sequence(&[CLS, 10, 11, 12]).unwrap();
        let padded = w.encode_sequence(&[CLS, 10, 11, 12, PAD, PAD, PAD]).unwrap();
        assert_eq!(padded.shape(), &[7, 32]);
        assert_eq!(&short.data()[..32], &padded.data()[..32]);
    }

    #[test]
    fn context_changes_token_rows() {
        let w = tiny();
        let a = w.encode_sequence(&[CLS, 10, 20, 11]).unwrap();
        let b = w.encode_sequence(&[CLS, 10, 30, 12]).unwrap();
        assert_ne!(&a.data()[32..64], &b.data()[32..64]);
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let w = tiny();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.hsw");
        w.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"HSW1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 32);
        let back = EncoderWeights::load(&path).unwrap();
        assert_eq!(back.store(), w.store());
        fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(EncoderWeights::load(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn pretrain_needs_steps() {
        let corpus = SyntheticCorpus::standard(0);
        let settings = PretrainSettings {
            steps: 0,
            ..Default::default()
        };
        let r = pretrain(&corpus, EncoderDims::default(), &settings, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(r.is_err());
    }

    #[test]
    fn freezing_toggles() {
        let mut w = tiny();
        w.set_frozen(true);
        assert!(w.store().tensors().iter().all(|t| !t.requires_grad()));
        w.set_frozen(false);
        assert!(w.store().tensors().iter().all(|t| t.requires_grad()));
    }
}
