use rand::Rng;

/// Values byte-set favours half of the time.
const INTERESTING: [u8; 8] = [0x00, 0x01, 0x7F, 0x80, 0xFF, 0x20, 0x40, 0x10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MutationOp {
    BitFlip,
    ByteSet,
    Insert,
    Delete,
    BlockDuplicate,
    Splice,
    DictionaryInsert,
}

impl MutationOp {
    pub const ALL: [MutationOp; 7] = [
        MutationOp::BitFlip,
        MutationOp::ByteSet,
        MutationOp::Insert,
        MutationOp::Delete,
        MutationOp::BlockDuplicate,
        MutationOp::Splice,
        MutationOp::DictionaryInsert,
    ];
}

/// What a mutation may draw on besides the blob itself.
#[derive(Debug, Clone, Copy)]
pub struct MutationContext<'a> {
    pub dictionary: &'a [Vec<u8>],
    pub splice_pool: &'a [&'a [u8]],
    pub max_len: usize,
}

/// Applies one randomly chosen mutation.
pub fn mutate<R: Rng + ?Sized>(blob: &[u8], rng: &mut R, ctx: &MutationContext<'_>) -> Vec<u8> {
    let op = MutationOp::ALL[rng.gen_range(0..MutationOp::ALL.len())];
    apply(op, blob, rng, ctx)
}

/// Applies `op`. Operations that cannot apply (e.g. deleting from an empty
/// blob) return the input unchanged. The result never exceeds `max_len`.
pub fn apply<R: Rng + ?Sized>(op: MutationOp, blob: &[u8], rng: &mut R, ctx: &MutationContext<'_>) -> Vec<u8> {
    let mut out = blob.to_vec();
    match op {
        MutationOp::BitFlip => {
            if !out.is_empty() {
                let i = rng.gen_range(0..out.len());
                out[i] ^= 1 << rng.gen_range(0..8);
            }
        }
        MutationOp::ByteSet => {
            if !out.is_empty() {
                let i = rng.gen_range(0..out.len());
                out[i] = random_byte(rng);
            }
        }
        MutationOp::Insert => {
            let i = rng.gen_range(0..=out.len());
            let b = random_byte(rng);
            out.insert(i, b);
        }
        MutationOp::Delete => {
            if !out.is_empty() {
                let start = rng.gen_range(0..out.len());
                let n = rng.gen_range(1..=(out.len() - start).min(8));
                out.drain(start..start + n);
            }
        }
        MutationOp::BlockDuplicate => {
            if !out.is_empty() {
                let start = rng.gen_range(0..out.len());
                let n = rng.gen_range(1..=(out.len() - start).min(16));
                let block = out[start..start + n].to_vec();
                let at = rng.gen_range(0..=out.len());
                out.splice(at..at, block);
            }
        }
        MutationOp::Splice => {
            if !ctx.splice_pool.is_empty() {
                let other = ctx.splice_pool[rng.gen_range(0..ctx.splice_pool.len())];
                let cut_a = rng.gen_range(0..=out.len());
                let cut_b = rng.gen_range(0..=other.len());
                out.truncate(cut_a);
                out.extend_from_slice(&other[cut_b..]);
            }
        }
        MutationOp::DictionaryInsert => {
            if !ctx.dictionary.is_empty() {
                let token = &ctx.dictionary[rng.gen_range(0..ctx.dictionary.len())];
                let at = rng.gen_range(0..=out.len());
                if rng.gen_bool(0.5) {
                    out.splice(at..at, token.iter().copied());
                } else {
                    // overwrite in place, growing if needed
                    let end = (at + token.len()).min(out.len());
                    out.splice(at..end, token.iter().copied());
                }
            }
        }
    }
    out.truncate(ctx.max_len);
    out
}

fn random_byte<R: Rng + ?Sized>(rng: &mut R) -> u8 {
    if rng.gen_bool(0.5) {
        INTERESTING[rng.gen_range(0..INTERESTING.len())]
    } else {
        rng.gen()
    }
}
