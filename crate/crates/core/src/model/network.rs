//! Forward and backward passes for [`VisionModel`].
//!
//! Training can start at any point of the network: from patches, from the
//! token sequence entering block `i`, or from the pooled feature. The
//! frozen prefix before that point is evaluated once by [`VisionModel::prefix`]
//! and its output fed to [`VisionModel::forward_train`].

use super::layers::{gelu, gelu_grad, gemm_strided, softmax_in_place, LnCache};
use super::{BatchOutputs, Block, Group, Parameters, Pooling, VisionModel};

/// Where a forward pass starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Entry {
    Patches,
    /// Token sequence entering block `i`; `i == depth` means the final norm.
    Tokens(usize),
    Pooled,
}

/// Loss gradients with respect to each head output. `None` means the task
/// does not contribute and its head is skipped entirely.
#[derive(Debug, Clone, Default)]
pub(crate) struct OutputGrads {
    pub beam: Option<Vec<f64>>,
    pub pos: Option<Vec<f64>>,
    pub blk: Option<Vec<f64>>,
}

struct BlockTape {
    ln1: LnCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    u: Vec<f64>,
    g: Vec<f64>,
}

/// Activations recorded by [`VisionModel::forward_train`].
pub(crate) struct Tape {
    entry: Entry,
    batch: usize,
    patches: Option<Vec<f64>>,
    blocks: Vec<BlockTape>,
    norm: Option<LnCache>,
    pooled: Vec<f64>,
}

impl VisionModel {
    /// Earliest point of the network that contains a trainable group.
    pub(crate) fn entry_point(&self) -> Entry {
        if self.is_trainable(Group::Embed) {
            return Entry::Patches;
        }
        if let Some(i) = (0..self.backbone.depth).find(|&i| self.is_trainable(Group::Block(i))) {
            return Entry::Tokens(i);
        }
        if self.is_trainable(Group::Norm) {
            return Entry::Tokens(self.backbone.depth);
        }
        Entry::Pooled
    }

    /// Width of one sample's activation at `entry`.
    pub(crate) fn entry_width(&self, entry: Entry) -> usize {
        match entry {
            Entry::Patches => self.backbone.num_patches() * self.backbone.patch_dim(),
            Entry::Tokens(_) => self.backbone.seq_len() * self.backbone.embed_dim,
            Entry::Pooled => self.backbone.embed_dim,
        }
    }

    /// Evaluates the network from patches up to `entry`.
    pub(crate) fn prefix(&self, patches: &[f64], batch: usize, entry: Entry) -> Vec<f64> {
        let stop = match entry {
            Entry::Patches => return patches.to_vec(),
            Entry::Tokens(i) => i,
            Entry::Pooled => self.backbone.depth,
        };
        let mut x = self.embed_tokens(patches, batch);
        for i in 0..stop {
            x = self.block_forward(i, x, batch, None);
        }
        if entry == Entry::Pooled {
            x = self.pool(&x, batch).0;
        }
        x
    }

    fn embed_tokens(&self, patches: &[f64], batch: usize) -> Vec<f64> {
        let p = &self.params;
        let d = self.backbone.embed_dim;
        let np = self.backbone.num_patches();
        let seq = self.backbone.seq_len();
        let proj = p.patch.forward(patches, batch * np);
        let offset = seq - np;
        let mut x = vec![0.0; batch * seq * d];
        for b in 0..batch {
            if let Some(cls) = &p.cls {
                let row = &mut x[b * seq * d..b * seq * d + d];
                for j in 0..d {
                    row[j] = cls[j] + p.pos[j];
                }
            }
            for t in 0..np {
                let dst = (b * seq + offset + t) * d;
                let src = (b * np + t) * d;
                let pos = (offset + t) * d;
                for j in 0..d {
                    x[dst + j] = proj[src + j] + p.pos[pos + j];
                }
            }
        }
        x
    }

    fn block_forward(&self, i: usize, x: Vec<f64>, batch: usize, tape: Option<&mut Vec<BlockTape>>) -> Vec<f64> {
        let blk = &self.params.blocks[i];
        let d = self.backbone.embed_dim;
        let seq = self.backbone.seq_len();
        let nh = self.backbone.heads;
        let dh = d / nh;
        let rows = batch * seq;
        let scale = 1.0 / (dh as f64).sqrt();

        let (h1, ln1) = blk.ln1.forward(&x);
        let qkv = blk.qkv.forward(&h1, rows);
        let mut probs = vec![0.0; batch * nh * seq * seq];
        let mut attn = vec![0.0; rows * d];
        for b in 0..batch {
            for h in 0..nh {
                let base = b * seq * 3 * d + h * dh;
                let pr = &mut probs[(b * nh + h) * seq * seq..(b * nh + h + 1) * seq * seq];
                // scores = Q K^T * scale
                gemm_strided(
                    seq,
                    dh,
                    seq,
                    scale,
                    &qkv[base..],
                    3 * d,
                    1,
                    &qkv[base + d..],
                    1,
                    3 * d,
                    0.0,
                    pr,
                    seq,
                    1,
                );
                for row in pr.chunks_exact_mut(seq) {
                    softmax_in_place(row);
                }
                gemm_strided(
                    seq,
                    seq,
                    dh,
                    1.0,
                    pr,
                    seq,
                    1,
                    &qkv[base + 2 * d..],
                    3 * d,
                    1,
                    0.0,
                    &mut attn[b * seq * d + h * dh..],
                    d,
                    1,
                );
            }
        }
        let a = blk.proj.forward(&attn, rows);
        let x2: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let (h2, ln2) = blk.ln2.forward(&x2);
        let u = blk.fc1.forward(&h2, rows);
        let g: Vec<f64> = u.iter().map(|&v| gelu(v)).collect();
        let f = blk.fc2.forward(&g, rows);
        let out: Vec<f64> = x2.iter().zip(&f).map(|(u, v)| u + v).collect();
        if let Some(tape) = tape {
            tape.push(BlockTape {
                ln1,
                h1,
                qkv,
                probs,
                attn,
                ln2,
                h2,
                u,
                g,
            });
        }
        out
    }

    fn pool(&self, x: &[f64], batch: usize) -> (Vec<f64>, LnCache) {
        let d = self.backbone.embed_dim;
        let seq = self.backbone.seq_len();
        let (y, cache) = self.params.norm.forward(x);
        let mut pooled = vec![0.0; batch * d];
        for b in 0..batch {
            let out = &mut pooled[b * d..(b + 1) * d];
            match self.backbone.pooling {
                Pooling::Mean => {
                    for t in 0..seq {
                        let row = &y[(b * seq + t) * d..(b * seq + t + 1) * d];
                        for j in 0..d {
                            out[j] += row[j];
                        }
                    }
                    for v in out.iter_mut() {
                        *v /= seq as f64;
                    }
                }
                Pooling::ClassToken => out.copy_from_slice(&y[b * seq * d..b * seq * d + d]),
            }
        }
        (pooled, cache)
    }

    fn heads_forward(&self, pooled: &[f64], batch: usize) -> BatchOutputs {
        let p = &self.params;
        BatchOutputs {
            batch,
            beam_classes: self.heads.beam_classes,
            beam_logits: p.head_beam.forward(pooled, batch),
            position: p.head_pos.forward(pooled, batch),
            blockage: p.head_blk.as_ref().map(|h| h.forward(pooled, batch)),
        }
    }

    /// Runs the network from `entry` and records what backward needs.
    pub(crate) fn forward_train(&self, input: &[f64], batch: usize, entry: Entry) -> (BatchOutputs, Tape) {
        let depth = self.backbone.depth;
        let mut tape = Tape {
            entry,
            batch,
            patches: None,
            blocks: Vec::new(),
            norm: None,
            pooled: Vec::new(),
        };
        let pooled = match entry {
            Entry::Pooled => input.to_vec(),
            _ => {
                let (mut x, first) = match entry {
                    Entry::Patches => {
                        tape.patches = Some(input.to_vec());
                        (self.embed_tokens(input, batch), 0)
                    }
                    Entry::Tokens(i) => (input.to_vec(), i),
                    Entry::Pooled => unreachable!(),
                };
                for i in first..depth {
                    x = self.block_forward(i, x, batch, Some(&mut tape.blocks));
                }
                let (pooled, cache) = self.pool(&x, batch);
                tape.norm = Some(cache);
                pooled
            }
        };
        let out = self.heads_forward(&pooled, batch);
        tape.pooled = pooled;
        (out, tape)
    }

    /// Accumulates parameter gradients for every layer covered by `tape`.
    pub(crate) fn backward(&self, tape: &Tape, dout: &OutputGrads, grads: &mut Parameters) {
        let p = &self.params;
        let d = self.backbone.embed_dim;
        let batch = tape.batch;
        let mut dpooled = vec![0.0; batch * d];
        let mut any = false;
        let mut head = |layer: &super::Linear, g: &Option<Vec<f64>>, gl: &mut super::Linear| {
            if let Some(g) = g {
                let dx = layer.backward(&tape.pooled, g, batch, gl, true).expect("dx requested");
                for (a, b) in dpooled.iter_mut().zip(&dx) {
                    *a += b;
                }
                any = true;
            }
        };
        head(&p.head_beam, &dout.beam, &mut grads.head_beam);
        head(&p.head_pos, &dout.pos, &mut grads.head_pos);
        if let (Some(h), Some(gh)) = (&p.head_blk, grads.head_blk.as_mut()) {
            head(h, &dout.blk, gh);
        }
        if !any || tape.entry == Entry::Pooled {
            return;
        }

        let seq = self.backbone.seq_len();
        let mut dy = vec![0.0; batch * seq * d];
        for b in 0..batch {
            let src = &dpooled[b * d..(b + 1) * d];
            match self.backbone.pooling {
                Pooling::Mean => {
                    for t in 0..seq {
                        let row = &mut dy[(b * seq + t) * d..(b * seq + t + 1) * d];
                        for j in 0..d {
                            row[j] = src[j] / seq as f64;
                        }
                    }
                }
                Pooling::ClassToken => dy[b * seq * d..b * seq * d + d].copy_from_slice(src),
            }
        }
        let norm_cache = tape.norm.as_ref().expect("norm cache recorded");
        let mut dx = p.norm.backward(norm_cache, &dy, &mut grads.norm);

        let first = self.backbone.depth - tape.blocks.len();
        for (k, bt) in tape.blocks.iter().enumerate().rev() {
            let i = first + k;
            dx = block_backward(
                &p.blocks[i],
                bt,
                dx,
                batch,
                seq,
                self.backbone.heads,
                &mut grads.blocks[i],
            );
        }

        if let Some(patches) = &tape.patches {
            let np = self.backbone.num_patches();
            let offset = seq - np;
            let mut dproj = vec![0.0; batch * np * d];
            for b in 0..batch {
                if let Some(gcls) = grads.cls.as_mut() {
                    for j in 0..d {
                        gcls[j] += dx[b * seq * d + j];
                    }
                }
                for t in 0..seq {
                    let row = &dx[(b * seq + t) * d..(b * seq + t + 1) * d];
                    for j in 0..d {
                        grads.pos[t * d + j] += row[j];
                    }
                    if t >= offset {
                        dproj[(b * np + t - offset) * d..(b * np + t - offset + 1) * d].copy_from_slice(row);
                    }
                }
            }
            p.patch.backward(patches, &dproj, batch * np, &mut grads.patch, false);
        }
    }
}

fn block_backward(
    blk: &Block,
    t: &BlockTape,
    dout: Vec<f64>,
    batch: usize,
    seq: usize,
    nh: usize,
    g: &mut Block,
) -> Vec<f64> {
    let d = blk.ln1.dim;
    let dh = d / nh;
    let rows = batch * seq;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut dg = blk.fc2.backward(&t.g, &dout, rows, &mut g.fc2, true).expect("dx");
    for (v, &u) in dg.iter_mut().zip(&t.u) {
        *v *= gelu_grad(u);
    }
    let dh2 = blk.fc1.backward(&t.h2, &dg, rows, &mut g.fc1, true).expect("dx");
    let dln2 = blk.ln2.backward(&t.ln2, &dh2, &mut g.ln2);
    let dx2: Vec<f64> = dout.iter().zip(&dln2).map(|(a, b)| a + b).collect();

    let dattn = blk.proj.backward(&t.attn, &dx2, rows, &mut g.proj, true).expect("dx");
    let mut dqkv = vec![0.0; rows * 3 * d];
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batch {
        for h in 0..nh {
            let base = b * seq * 3 * d + h * dh;
            let obase = b * seq * d + h * dh;
            let pr = &t.probs[(b * nh + h) * seq * seq..(b * nh + h + 1) * seq * seq];
            // dP = dO V^T
            gemm_strided(
                seq,
                dh,
                seq,
                1.0,
                &dattn[obase..],
                d,
                1,
                &t.qkv[base + 2 * d..],
                1,
                3 * d,
                0.0,
                &mut dp,
                seq,
                1,
            );
            // dV = P^T dO
            gemm_strided(
                seq,
                seq,
                dh,
                1.0,
                pr,
                1,
                seq,
                &dattn[obase..],
                d,
                1,
                0.0,
                &mut dqkv[base + 2 * d..],
                3 * d,
                1,
            );
            // dS = P * (dP - rowsum(dP * P))
            for r in 0..seq {
                let prow = &pr[r * seq..(r + 1) * seq];
                let drow = &mut dp[r * seq..(r + 1) * seq];
                let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                for (dv, pv) in drow.iter_mut().zip(prow) {
                    *dv = pv * (*dv - dot);
                }
            }
            // dQ = scale * dS K ; dK = scale * dS^T Q
            gemm_strided(
                seq,
                seq,
                dh,
                scale,
                &dp,
                seq,
                1,
                &t.qkv[base + d..],
                3 * d,
                1,
                0.0,
                &mut dqkv[base..],
                3 * d,
                1,
            );
            gemm_strided(
                seq,
                seq,
                dh,
                scale,
                &dp,
                1,
                seq,
                &t.qkv[base..],
                3 * d,
                1,
                0.0,
                &mut dqkv[base + d..],
                3 * d,
                1,
            );
        }
    }
    let dh1 = blk.qkv.backward(&t.h1, &dqkv, rows, &mut g.qkv, true).expect("dx");
    let dln1 = blk.ln1.backward(&t.ln1, &dh1, &mut g.ln1);
    dx2.iter().zip(&dln1).map(|(a, b)| a + b).collect()
}
