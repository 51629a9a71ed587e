//! Conformer blocks with dynamic chunk masks and per-layer streaming caches.
//!
//! Block order: half-FFN → self-attention (quiet softmax, chunk-masked) →
//! causal conv module → half-FFN → layer norm. Every norm is per-frame, the
//! convolution is strictly causal (left padding only), and attention carries
//! no positional encoding, so chunked execution with caches reproduces the
//! masked full-sequence forward exactly.

use crate::layers::{LinearParams, NormParams};
use crate::masks::ChunkMask;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone)]
pub struct ConformerConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ffn_expansion: usize,
}

impl ConformerConfig {
    pub fn validate(&self) -> crate::Result<()> {
        if self.dim % self.heads != 0 {
            return Err(crate::Error::InvalidArg(format!(
                "dim {} not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(crate::Error::InvalidArg(format!(
                "conv kernel {} must be odd",
                self.conv_kernel
            )));
        }
        Ok(())
    }
}

/// Attention K/V history plus convolution left context for one block of one
/// stream. Histories are truncated to `max_history` rows; the conv tail is
/// always exactly kernel−1 rows (zeros mirror the offline left padding).
#[derive(Debug, Clone)]
pub struct LayerCache<F: Scalar> {
    pub keys: Tensor<F>,
    pub values: Tensor<F>,
    pub conv_tail: Tensor<F>,
    pub max_history: usize,
}

impl<F: Scalar> LayerCache<F> {
    pub fn fresh(dim: usize, conv_kernel: usize, max_history: usize) -> Self {
        LayerCache {
            keys: Tensor::zeros(&[0, dim]),
            values: Tensor::zeros(&[0, dim]),
            conv_tail: Tensor::zeros(&[conv_kernel - 1, dim]),
            max_history,
        }
    }

    pub fn history_len(&self) -> usize {
        self.keys.rows()
    }
}

struct FeedForward {
    norm: NormParams,
    lift: LinearParams,
    drop: LinearParams,
}

impl FeedForward {
    fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        expansion: usize,
    ) -> Self {
        FeedForward {
            norm: NormParams::init(store, &format!("{prefix}.ln"), dim),
            lift: LinearParams::init(store, rng, &format!("{prefix}.in"), dim, dim * expansion),
            drop: LinearParams::init(store, rng, &format!("{prefix}.out"), dim * expansion, dim),
        }
    }

    /// Macaron half-step: x + ½·FFN(LN(x)).
    fn apply<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, x: Var) -> Var {
        let h = self.norm.apply(tape, store, x);
        let h = self.lift.apply(tape, store, h);
        let h = tape.silu(h);
        let h = self.drop.apply(tape, store, h);
        let h = tape.scale(h, F::from_f64(0.5));
        tape.add(x, h)
    }
}

pub(crate) struct Attention {
    pub(crate) norm: NormParams,
    wq: LinearParams,
    wk: LinearParams,
    wv: LinearParams,
    wo: LinearParams,
    heads: usize,
}

pub(crate) struct AttentionOut {
    pub(crate) out: Var,
    pub(crate) new_keys: Var,
    pub(crate) new_values: Var,
}

impl Attention {
    pub(crate) fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Self {
        Attention {
            norm: NormParams::init(store, &format!("{prefix}.ln"), dim),
            wq: LinearParams::init(store, rng, &format!("{prefix}.q"), dim, dim),
            wk: LinearParams::init(store, rng, &format!("{prefix}.k"), dim, dim),
            wv: LinearParams::init(store, rng, &format!("{prefix}.v"), dim, dim),
            wo: LinearParams::init(store, rng, &format!("{prefix}.o"), dim, dim),
            heads,
        }
    }

    /// Quiet-attention over `[kv_prefix ‖ x]`. `limits[i]` bounds the allowed
    /// key prefix for chunk row i, counted over the concatenated length.
    pub(crate) fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        kv_prefix: Option<(Var, Var)>,
        limits: &[usize],
    ) -> AttentionOut {
        let dim = tape.value(x).cols();
        let dh = dim / self.heads;
        let xn = self.norm.apply(tape, store, x);
        let q = self.wq.apply(tape, store, xn);
        let new_keys = self.wk.apply(tape, store, xn);
        let new_values = self.wv.apply(tape, store, xn);
        let (k_all, v_all) = match kv_prefix {
            Some((pk, pv)) => (
                tape.concat_rows(pk, new_keys),
                tape.concat_rows(pv, new_values),
            ),
            None => (new_keys, new_values),
        };
        let scale = F::from_f64(1.0 / (dh as f64).sqrt());
        let mut contexts = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi);
            let kh = tape.slice_cols(k_all, lo, hi);
            let vh = tape.slice_cols(v_all, lo, hi);
            let scores = tape.matmul_nt(qh, kh);
            let scores = tape.scale(scores, scale);
            let weights = tape.quiet_softmax_rows(scores, limits.to_vec());
            contexts.push(tape.matmul(weights, vh));
        }
        let ctx = tape.concat_cols(&contexts);
        let out = self.wo.apply(tape, store, ctx);
        let out = tape.add(x, out);
        AttentionOut { out, new_keys, new_values }
    }
}

struct ConvModule {
    norm: NormParams,
    pointwise_in: LinearParams,
    dw_w: ParamId,
    dw_b: ParamId,
    mid_norm: NormParams,
    pointwise_out: LinearParams,
}

impl ConvModule {
    fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        dim: usize,
        kernel: usize,
    ) -> Self {
        ConvModule {
            norm: NormParams::init(store, &format!("{prefix}.ln"), dim),
            pointwise_in: LinearParams::init(store, rng, &format!("{prefix}.pw1"), dim, dim * 2),
            dw_w: store.add(
                &format!("{prefix}.dw.w"),
                crate::params::randn_tensor(rng, &[kernel, dim], 1.0 / (kernel as f64).sqrt()),
            ),
            dw_b: store.add(&format!("{prefix}.dw.b"), Tensor::zeros(&[dim])),
            mid_norm: NormParams::init(store, &format!("{prefix}.ln2"), dim),
            pointwise_out: LinearParams::init(store, rng, &format!("{prefix}.pw2"), dim, dim),
        }
    }

    /// Returns the module output plus the GLU rows (the depthwise conv
    /// input), which the streaming cache snapshots.
    fn apply<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        conv_tail: Option<Var>,
    ) -> (Var, Var) {
        let h = self.norm.apply(tape, store, x);
        let h = self.pointwise_in.apply(tape, store, h);
        let glu = tape.glu(h);
        let w = tape.param(store, self.dw_w);
        let b = tape.param(store, self.dw_b);
        let h = tape.depthwise_causal_conv(glu, w, b, conv_tail);
        let h = self.mid_norm.apply(tape, store, h);
        let h = tape.silu(h);
        let h = self.pointwise_out.apply(tape, store, h);
        let out = tape.add(x, h);
        (out, glu)
    }
}

pub struct ConformerBlock {
    ffn1: FeedForward,
    attn: Attention,
    conv: ConvModule,
    ffn2: FeedForward,
    final_norm: NormParams,
    dim: usize,
    kernel: usize,
}

impl ConformerBlock {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        cfg: &ConformerConfig,
    ) -> Self {
        ConformerBlock {
            ffn1: FeedForward::init(store, rng, &format!("{prefix}.ffn1"), cfg.dim, cfg.ffn_expansion),
            attn: Attention::init(store, rng, &format!("{prefix}.attn"), cfg.dim, cfg.heads),
            conv: ConvModule::init(store, rng, &format!("{prefix}.conv"), cfg.dim, cfg.conv_kernel),
            ffn2: FeedForward::init(store, rng, &format!("{prefix}.ffn2"), cfg.dim, cfg.ffn_expansion),
            final_norm: NormParams::init(store, &format!("{prefix}.ln"), cfg.dim),
            dim: cfg.dim,
            kernel: cfg.conv_kernel,
        }
    }

    /// Full-sequence forward under a chunk mask. No output frame depends on
    /// any frame its mask row forbids.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        mask: &ChunkMask,
    ) -> Var {
        assert_eq!(tape.value(x).cols(), self.dim, "block width mismatch");
        let limits = mask.row_limits();
        let x = self.ffn1.apply(tape, store, x);
        let att = self.attn.apply(tape, store, x, None, &limits);
        let (x, _glu) = self.conv.apply(tape, store, att.out, None);
        let x = self.ffn2.apply(tape, store, x);
        self.final_norm.apply(tape, store, x)
    }

    /// Streaming forward of one chunk against a cache. The chunk attends to
    /// the whole cached history plus all of itself (chunk-mask semantics).
    /// Only the first `commit` rows extend the returned cache, so
    /// speculative suffix rows (pseudo context) never contaminate later
    /// chunks.
    pub fn forward_streaming<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Var,
        cache: &LayerCache<F>,
        commit: usize,
    ) -> (Var, LayerCache<F>) {
        let chunk = tape.value(x).rows();
        assert_eq!(tape.value(x).cols(), self.dim, "chunk width mismatch");
        assert!(commit <= chunk);
        let hist = cache.history_len();
        let limits = vec![hist + chunk; chunk];
        let x = self.ffn1.apply(tape, store, x);
        let kv = if hist > 0 {
            Some((
                tape.input(cache.keys.clone()),
                tape.input(cache.values.clone()),
            ))
        } else {
            None
        };
        let att = self.attn.apply(tape, store, x, kv, &limits);
        let tail = tape.input(cache.conv_tail.clone());
        let (x, glu) = self.conv.apply(tape, store, att.out, Some(tail));
        let x = self.ffn2.apply(tape, store, x);
        let y = self.final_norm.apply(tape, store, x);

        let keep_last = |t: Tensor<F>, n: usize| -> Tensor<F> {
            if t.rows() > n {
                t.slice_rows(t.rows() - n, t.rows())
            } else {
                t
            }
        };
        let new_keys = cache
            .keys
            .vcat(&tape.value(att.new_keys).slice_rows(0, commit));
        let new_values = cache
            .values
            .vcat(&tape.value(att.new_values).slice_rows(0, commit));
        let conv_tail = keep_last(
            cache.conv_tail.vcat(&tape.value(glu).slice_rows(0, commit)),
            self.kernel - 1,
        );
        let next = LayerCache {
            keys: keep_last(new_keys, cache.max_history),
            values: keep_last(new_values, cache.max_history),
            conv_tail,
            max_history: cache.max_history,
        };
        (y, next)
    }
}

/// A stack of conformer blocks sharing one config.
pub struct ConformerStack {
    pub blocks: Vec<ConformerBlock>,
    pub cfg: ConformerConfig,
}

impl ConformerStack {
    pub fn init<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        rng: &mut R,
        prefix: &str,
        cfg: &ConformerConfig,
    ) -> Self {
        cfg.validate().expect("invalid conformer config");
        let blocks = (0..cfg.num_blocks)
            .map(|i| ConformerBlock::init(store, rng, &format!("{prefix}.block{i}"), cfg))
            .collect();
        ConformerStack { blocks, cfg: cfg.clone() }
    }

    /// Index of the block whose output feeds the HPC tap (the stack's
    /// midpoint, counting from one).
    pub fn mid_block(&self) -> usize {
        self.cfg.num_blocks / 2
    }

    /// Full-sequence forward; also returns the mid-stack output.
    pub fn forward<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        mut x: Var,
        mask: &ChunkMask,
    ) -> (Var, Var) {
        let mut mid = x;
        for (i, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, store, x, mask);
            if i + 1 == self.mid_block() {
                mid = x;
            }
        }
        (x, mid)
    }

    pub fn fresh_caches<F: Scalar>(&self, max_history: usize) -> Vec<LayerCache<F>> {
        (0..self.cfg.num_blocks)
            .map(|_| LayerCache::fresh(self.cfg.dim, self.cfg.conv_kernel, max_history))
            .collect()
    }

    /// Streaming forward of one chunk; caches advance by `commit` rows.
    pub fn forward_streaming<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        store: &ParamStore<F>,
        mut x: Var,
        caches: &mut [LayerCache<F>],
        commit: usize,
    ) -> Var {
        assert_eq!(caches.len(), self.blocks.len());
        for (block, cache) in self.blocks.iter().zip(caches.iter_mut()) {
            let (y, next) = block.forward_streaming(tape, store, x, cache, commit);
            *cache = next;
            x = y;
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::make_chunk_mask;
    use crate::params::randn_tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> ConformerConfig {
        ConformerConfig { num_blocks: 1, dim: 8, heads: 2, conv_kernel: 3, ffn_expansion: 2 }
    }

    fn build_block<F: Scalar>(seed: u64, cfg: &ConformerConfig) -> (ParamStore<F>, ConformerBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = ConformerBlock::init(&mut store, &mut rng, "b", cfg);
        (store, block)
    }

    fn run_full<F: Scalar>(
        store: &ParamStore<F>,
        block: &ConformerBlock,
        x: &Tensor<F>,
        chunk: usize,
    ) -> Tensor<F> {
        let mask = make_chunk_mask(x.rows(), chunk);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let y = block.forward(&mut tape, store, xv, &mask);
        tape.value(y).clone()
    }

    #[test]
    fn config_validation() {
        assert!(toy_cfg().validate().is_ok());
        let mut bad = toy_cfg();
        bad.heads = 3;
        assert!(bad.validate().is_err());
        let mut bad = toy_cfg();
        bad.conv_kernel = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn masked_frames_have_exactly_zero_influence() {
        let cfg = toy_cfg();
        let (store, block) = build_block::<f64>(1, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Tensor<f64> = randn_tensor(&mut rng, &[6, 8], 1.0);
        let base = run_full(&store, &block, &x, 2);
        // Perturb frame 5 (third chunk): frames 0..=3 may not change at all.
        let mut x2 = x.clone();
        for j in 0..8 {
            x2.set(5, j, x2.at(5, j) + 0.37);
        }
        let bumped = run_full(&store, &block, &x2, 2);
        for i in 0..4 {
            assert_eq!(base.row(i), bumped.row(i), "frame {i} leaked");
        }
        // frame 4 shares the chunk with frame 5 and must change
        assert!(base
            .row(4)
            .iter()
            .zip(bumped.row(4))
            .any(|(a, b)| a != b));
    }

    #[test]
    fn full_mask_equals_single_chunk_streaming() {
        let cfg = toy_cfg();
        let (store, block) = build_block::<f64>(3, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Tensor<f64> = randn_tensor(&mut rng, &[5, 8], 1.0);
        // chunk mask c = T: one chunk covering the whole sequence
        let offline = run_full(&store, &block, &x, 5);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let cache = LayerCache::fresh(8, 3, 64);
        let (y, next) = block.forward_streaming(&mut tape, &store, xv, &cache, 5);
        let streamed = tape.value(y).clone();
        assert_eq!(offline.data(), streamed.data(), "paths must agree bit-exactly");
        assert_eq!(next.history_len(), 5);
        assert_eq!(next.conv_tail.rows(), 2); // exactly kernel−1 frames
        // and the all-true mask agrees with the unmasked reference
        let full = run_full(&store, &block, &x, 0);
        assert_eq!(full.data(), offline.data());
    }

    #[test]
    fn chunked_stream_matches_masked_full_sequence() {
        let cfg = ConformerConfig { num_blocks: 2, dim: 8, heads: 2, conv_kernel: 3, ffn_expansion: 2 };
        for &chunk in &[1usize, 2, 4] {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut store: ParamStore<f64> = ParamStore::new();
            let stack = ConformerStack::init(&mut store, &mut rng, "s", &cfg);
            let x: Tensor<f64> = randn_tensor(&mut rng, &[8, 8], 1.0);

            let mask = make_chunk_mask(8, chunk);
            let mut tape = Tape::new();
            let xv = tape.input(x.clone());
            let (y, _) = stack.forward(&mut tape, &store, xv, &mask);
            let offline = tape.value(y).clone();

            let mut caches = stack.fresh_caches::<f64>(64);
            let mut rows: Vec<f64> = Vec::new();
            for start in (0..8).step_by(chunk) {
                let piece = x.slice_rows(start, start + chunk);
                let mut tape = Tape::new();
                let xv = tape.input(piece);
                let y = stack.forward_streaming(&mut tape, &store, xv, &mut caches, chunk);
                rows.extend_from_slice(tape.value(y).data());
            }
            let streamed = Tensor::matrix(8, 8, rows);
            let diff = offline.max_abs_diff(&streamed);
            assert!(diff <= 1e-10, "chunk {chunk}: diff {diff}");
        }
    }

    #[test]
    fn chunked_stream_matches_in_f32_within_1e5() {
        let cfg = ConformerConfig { num_blocks: 2, dim: 8, heads: 2, conv_kernel: 3, ffn_expansion: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store: ParamStore<f32> = ParamStore::new();
        let stack = ConformerStack::init(&mut store, &mut rng, "s", &cfg);
        let x: Tensor<f32> = randn_tensor(&mut rng, &[8, 8], 1.0);

        let mask = make_chunk_mask(8, 2);
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let (y, _) = stack.forward(&mut tape, &store, xv, &mask);
        let offline = tape.value(y).clone();

        let mut caches = stack.fresh_caches::<f32>(64);
        let mut rows: Vec<f32> = Vec::new();
        for start in (0..8).step_by(2) {
            let piece = x.slice_rows(start, start + 2);
            let mut tape = Tape::new();
            let xv = tape.input(piece);
            let y = stack.forward_streaming(&mut tape, &store, xv, &mut caches, 2);
            rows.extend_from_slice(tape.value(y).data());
        }
        let streamed = Tensor::matrix(8, 8, rows);
        assert!(offline.max_abs_diff(&streamed) <= 1e-5);
    }

    #[test]
    fn jacobian_sparsity_matches_mask() {
        // finite-difference Jacobian through one block, T=5, chunk 2
        let cfg = toy_cfg();
        let (store, block) = build_block::<f64>(13, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x: Tensor<f64> = randn_tensor(&mut rng, &[5, 8], 1.0);
        let base = run_full(&store, &block, &x, 2);
        let mask = make_chunk_mask(5, 2);
        let h = 1e-4;
        for j in 0..5 {
            let mut x2 = x.clone();
            x2.set(j, 3, x2.at(j, 3) + h);
            let bumped = run_full(&store, &block, &x2, 2);
            for i in 0..5 {
                let delta: f64 = base
                    .row(i)
                    .iter()
                    .zip(bumped.row(i))
                    .map(|(a, b)| (a - b).abs())
                    .sum();
                if mask.allowed(i, j) {
                    if i == j {
                        assert!(delta > 1e-9, "expected self dependency at {i}");
                    }
                } else {
                    assert_eq!(delta, 0.0, "forbidden influence {j}→{i}");
                }
            }
        }
    }

    #[test]
    fn cache_truncation_is_invisible_when_attention_is_dead() {
        // Force near-zero attention everywhere: zero q/k weights with biases
        // q = 1, k = −12 give a constant per-head score of −12·dh/√dh = −24,
        // i.e. a per-key quiet-attention weight of ~4e−11 (< 1e−7 premise).
        let cfg = toy_cfg();
        let (mut store, block) = build_block::<f64>(21, &cfg);
        for name in ["b.attn.q.w", "b.attn.k.w"] {
            let id = store.id_of(name).unwrap();
            store.set_value(id, Tensor::zeros(&[8, 8]));
        }
        let idq = store.id_of("b.attn.q.b").unwrap();
        store.set_value(idq, Tensor::full(&[8], 1.0));
        let idk = store.id_of("b.attn.k.b").unwrap();
        store.set_value(idk, Tensor::full(&[8], -12.0));
        let dh = 4.0f64; // dim 8, 2 heads
        let score = (1.0 * -12.0 * dh) / dh.sqrt();
        assert!(score.exp() < 1e-7, "premise violated: weight {}", score.exp());

        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x: Tensor<f64> = randn_tensor(&mut rng, &[100, 8], 1.0);
        let run = |mh: usize| {
            let mut caches = vec![LayerCache::fresh(8, 3, mh)];
            let mut rows: Vec<f64> = Vec::new();
            for start in (0..100).step_by(2) {
                let mut tape = Tape::new();
                let xv = tape.input(x.slice_rows(start, start + 2));
                let (y, next) = block.forward_streaming(&mut tape, &store, xv, &caches[0], 2);
                caches[0] = next;
                rows.extend_from_slice(tape.value(y).data());
            }
            Tensor::matrix(100, 8, rows)
        };
        let truncated = run(16);
        let unbounded = run(1000);
        let diff = truncated.max_abs_diff(&unbounded);
        assert!(diff <= 1e-7, "truncation visible: {diff}");
    }

    #[test]
    fn conv_left_context_is_exactly_kernel_minus_one() {
        let cfg = ConformerConfig { num_blocks: 1, dim: 8, heads: 2, conv_kernel: 7, ffn_expansion: 2 };
        let (store, block) = build_block::<f64>(30, &cfg);
        let mut cache = LayerCache::fresh(8, 7, 64);
        assert_eq!(cache.conv_tail.rows(), 6);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..3 {
            let x: Tensor<f64> = randn_tensor(&mut rng, &[2, 8], 1.0);
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let (_, next) = block.forward_streaming(&mut tape, &store, xv, &cache, 2);
            cache = next;
            assert_eq!(cache.conv_tail.rows(), 6);
        }
    }
}
