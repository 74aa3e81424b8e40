//! The denoiser: embeddings, residual blocks of encoder cells, output head.
//!
//! Block `b` maps `h` to `h + Norm(cells(h))`; the outputs of all blocks are
//! summed into the head. Inside a cell:
//!
//! ```text
//! x1 = LN(x  + Dropout(Mix(x)))
//! x2 = LN(x1 + Dropout(FF(x1)))
//! ```
//!
//! with one layer norm shared by both sub-layers of a cell. `Mix` is
//! relational self-attention or, for the ablation backbone, a per-position
//! feed-forward. Activations live on packed [`Grid`]s; with [`Span::Masked`]
//! each layer only visits the rows that can still influence a masked output.

use super::grid::Grid;
use super::layers::*;
use super::params::{Init, ParamId, ParamStore};
use super::{Backbone, DenoiserConfig, Span};
use crate::diffusion::batch::{MaskedBatch, Tensor3};
use crate::error::{CdmError, Result};
use crate::linalg::Mat;
use crate::rng::{stream, CdmRng};

const INIT_SD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
struct MlpIds {
    w1: ParamId,
    b1: Option<ParamId>,
    w2: ParamId,
    b2: Option<ParamId>,
    hidden: usize,
}

#[derive(Debug, Clone, Copy)]
struct RsaIds {
    proj1: ParamId,
    proj2: ParamId,
    h1_w: ParamId,
    h1_b: ParamId,
    h2_w: ParamId,
    h2_b: ParamId,
}

#[derive(Debug, Clone, Copy)]
enum MixIds {
    Rsa(RsaIds),
    Mlp(MlpIds),
}

#[derive(Debug, Clone)]
struct CellIds {
    mix: MixIds,
    ln_g: ParamId,
    ln_b: ParamId,
    ff: MlpIds,
}

#[derive(Debug, Clone)]
struct BlockIds {
    cells: Vec<CellIds>,
    norm_g: ParamId,
    norm_b: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    value_w: ParamId,
    value_b: ParamId,
    time: ParamId,
    feature: ParamId,
    step: ParamId,
    mask: ParamId,
    blocks: Vec<BlockIds>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    Relu,
    Silu,
}

struct MlpCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

struct RsaCache {
    x: Mat,
    pre1: Mat,
    act1: Mat,
    q: Mat,
    qn: Vec<f64>,
    k: Mat,
    kn: Vec<f64>,
    v: Mat,
    vn: Vec<f64>,
    gk: Mat,
    av: Mat,
    nbr_conv: Vec<usize>,
    nbr_rel: Vec<usize>,
}

enum MixCache {
    Rsa(RsaCache),
    Mlp(MlpCache),
}

struct CellCache {
    mix: MixCache,
    qmap: Vec<usize>,
    in_rows: usize,
    drop1: Vec<f64>,
    ln1: LayerNormCache,
    ff: MlpCache,
    drop2: Vec<f64>,
    ln2: LayerNormCache,
}

struct BlockCache {
    cells: Vec<CellCache>,
    norm: LayerNormCache,
    map: Vec<usize>,
    in_rows: usize,
    skip_map: Vec<usize>,
    out_rows: usize,
}

struct EmbedCache {
    z: Vec<f64>,
    coords: Vec<(usize, usize, usize)>,
    mask: Vec<usize>,
    k: usize,
}

/// Everything the backward pass needs from one forward pass.
pub struct Tape {
    embed: EmbedCache,
    blocks: Vec<BlockCache>,
    skip: Mat,
    out_coords: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
    ids: Ids,
}

impl Denoiser {
    /// Builds a freshly initialised network; the seed fixes every weight.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, 0x1417);
        let mut ps = ParamStore::new();
        let c = config.embed_dim;
        let tn = Init::TruncNormal(INIT_SD);
        let value_w = ps.add("embed.value.w", &[1, c], tn, &mut rng);
        let value_b = ps.add("embed.value.b", &[c], Init::Zeros, &mut rng);
        let time = ps.add("embed.time", &[config.max_time, c], tn, &mut rng);
        let feature = ps.add("embed.feature", &[config.num_features, c], tn, &mut rng);
        let step = ps.add("embed.step", &[config.diffusion_steps + 1, c], tn, &mut rng);
        let mask = ps.add("embed.mask", &[2, c], tn, &mut rng);

        let heads = config.num_heads;
        let dh = c / heads;
        let n_off = config.kernel_size[0] * config.kernel_size[1];
        let mut blocks = Vec::new();
        for b in 0..config.residual_layers {
            let mut cells = Vec::new();
            for j in 0..config.encoder_cells {
                let pre = format!("block{b}.cell{j}");
                let mix = match config.backbone {
                    Backbone::Rsa => MixIds::Rsa(RsaIds {
                        proj1: ps.add(&format!("{pre}.rsa.proj1.w"), &[c, c], tn, &mut rng),
                        proj2: ps.add(&format!("{pre}.rsa.proj2.w"), &[c, 3 * c], tn, &mut rng),
                        h1_w: ps.add(&format!("{pre}.rsa.h1.w"), &[heads, n_off, dh, dh], tn, &mut rng),
                        h1_b: ps.add(&format!("{pre}.rsa.h1.b"), &[c], Init::Zeros, &mut rng),
                        h2_w: ps.add(&format!("{pre}.rsa.h2.w"), &[heads, n_off, dh, dh], tn, &mut rng),
                        h2_b: ps.add(&format!("{pre}.rsa.h2.b"), &[c], Init::Zeros, &mut rng),
                    }),
                    Backbone::FeedForward => MixIds::Mlp(add_mlp(&mut ps, &format!("{pre}.mix"), c, c, &mut rng)),
                };
                let ln_g = ps.add(&format!("{pre}.norm.g"), &[c], Init::Ones, &mut rng);
                let ln_b = ps.add(&format!("{pre}.norm.b"), &[c], Init::Zeros, &mut rng);
                let ff = add_mlp(&mut ps, &format!("{pre}.ff"), c, config.ff_dim, &mut rng);
                cells.push(CellIds { mix, ln_g, ln_b, ff });
            }
            let norm_g = ps.add(&format!("block{b}.norm.g"), &[c], Init::Ones, &mut rng);
            let norm_b = ps.add(&format!("block{b}.norm.b"), &[c], Init::Zeros, &mut rng);
            blocks.push(BlockIds { cells, norm_g, norm_b });
        }
        let head_w = ps.add("head.w", &[c, 1], tn, &mut rng);
        let head_b = ps.add("head.b", &[1], Init::Zeros, &mut rng);
        let ids = Ids { value_w, value_b, time, feature, step, mask, blocks, head_w, head_b };
        Ok(Denoiser { config, params: ps, ids })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Eval-mode prediction of the noise, shape `(B, T, F)`.
    pub fn predict(&self, z: &Tensor3, batch: &MaskedBatch, k: usize, span: Span) -> Result<Tensor3> {
        self.forward(z, batch, k, span, None).map(|(out, _)| out)
    }

    /// Forward pass; dropout is active iff `rng` is given.
    pub fn forward(
        &self,
        z: &Tensor3,
        batch: &MaskedBatch,
        k: usize,
        span: Span,
        mut rng: Option<&mut CdmRng>,
    ) -> Result<(Tensor3, Tape)> {
        self.check_inputs(z, batch, k)?;
        let grids = self.grids(batch, span);
        let (mut h, embed) = self.embed(z, batch, k, &grids[0]);
        check_finite(&h, "embed")?;

        let p = &self.params;
        let last = grids.len() - 1;
        let mut level = 0;
        let mut block_caches = Vec::with_capacity(self.ids.blocks.len());
        let mut block_outs = Vec::with_capacity(self.ids.blocks.len());
        for (bi, bids) in self.ids.blocks.iter().enumerate() {
            let start_level = level;
            let mut x = h.clone();
            let mut cells = Vec::with_capacity(bids.cells.len());
            for (ci, cids) in bids.cells.iter().enumerate() {
                let (y, cache) = self.cell_forward(&x, cids, &grids[level], &grids[level + 1], rng.as_deref_mut());
                check_finite(&y, &format!("block{bi}.cell{ci}"))?;
                cells.push(cache);
                x = y;
                level += 1;
            }
            let (e, norm) = layer_norm(&x, p.value(bids.norm_g), p.value(bids.norm_b));
            let map = grids[start_level].map_from(&grids[level]);
            let in_rows = h.rows;
            let mut out = gather_rows(&h, &map);
            out.add_assign(&e);
            check_finite(&out, &format!("block{bi}"))?;
            let skip_map = grids[level].map_from(&grids[last]);
            block_caches.push(BlockCache { cells, norm, map, in_rows, skip_map, out_rows: out.rows });
            block_outs.push(out.clone());
            h = out;
        }

        let mut skip = Mat::zeros(grids[last].total, self.config.embed_dim);
        for (out, bc) in block_outs.iter().zip(&block_caches) {
            skip.add_assign(&gather_rows(out, &bc.skip_map));
        }
        let y = linear(&skip, p.value(self.ids.head_w), Some(p.value(self.ids.head_b)), 1);
        check_finite(&y, "head")?;

        let (b, t, f) = z.shape();
        let mut out = Tensor3::zeros(b, t, f);
        let out_coords = grids[last].coords();
        for (i, &(bb, tt, ff)) in out_coords.iter().enumerate() {
            out.set(bb, tt, ff, y.data[i]);
        }
        Ok((out, Tape { embed, blocks: block_caches, skip, out_coords }))
    }

    /// Accumulates parameter gradients given `d_out = ∂loss/∂prediction`.
    pub fn backward(&mut self, tape: Tape, d_out: &Tensor3) {
        let c = self.config.embed_dim;
        let Tape { embed, blocks, skip, out_coords } = tape;
        let dy = Mat::from_vec(
            out_coords.len(),
            1,
            out_coords.iter().map(|&(b, t, f)| d_out.get(b, t, f)).collect(),
        );
        let ids = self.ids.clone();
        let ps = &mut self.params;
        let d_skip = {
            let (w, dw) = ps.value_grad(ids.head_w);
            let w = w.to_vec();
            let mut db = vec![0.0];
            let d = linear_backward(&skip, &w, &dy, dw, Some(&mut db));
            ps.grad_mut(ids.head_b)[0] += db[0];
            d
        };

        // Gradient flowing into the output of the block currently processed.
        let mut d_h: Option<Mat> = None;
        for (bids, bc) in ids.blocks.iter().zip(blocks).rev() {
            let mut d_out = scatter_rows(&d_skip, &bc.skip_map, bc.out_rows);
            if let Some(d) = d_h.take() {
                d_out.add_assign(&d);
            }
            let mut d_in = scatter_rows(&d_out, &bc.map, bc.in_rows);
            let mut dx = {
                let g = ps.value(bids.norm_g).to_vec();
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let d = layer_norm_backward(&bc.norm, &g, &d_out, &mut dg, &mut db);
                add_into(ps.grad_mut(bids.norm_g), &dg);
                add_into(ps.grad_mut(bids.norm_b), &db);
                d
            };
            for (cids, cc) in bids.cells.iter().zip(bc.cells).rev() {
                dx = cell_backward(ps, cids, cc, &dx, self.config.num_heads, c);
            }
            d_in.add_assign(&dx);
            d_h = Some(d_in);
        }
        let d_emb = d_h.expect("at least one residual block");
        embed_backward(ps, &ids, &embed, &d_emb);
    }

    fn check_inputs(&self, z: &Tensor3, batch: &MaskedBatch, k: usize) -> Result<()> {
        let (b, t, f) = z.shape();
        if batch.shape() != (b, t, f) {
            return Err(CdmError::Shape(format!("input {:?} vs batch {:?}", (b, t, f), batch.shape())));
        }
        if f != self.config.num_features {
            return Err(CdmError::Shape(format!("{f} features, model expects {}", self.config.num_features)));
        }
        if t > self.config.max_time {
            return Err(CdmError::Shape(format!("{t} time steps exceed max_time {}", self.config.max_time)));
        }
        if k > self.config.diffusion_steps {
            return Err(CdmError::Index(format!("diffusion step {k} > {}", self.config.diffusion_steps)));
        }
        Ok(())
    }

    fn grids(&self, batch: &MaskedBatch, span: Span) -> Vec<Grid> {
        let (b, t, f) = batch.shape();
        let layers = self.config.attention_layers();
        let r = self.config.receptive_radius();
        let first: Vec<Option<usize>> = (0..b)
            .map(|bi| match span {
                Span::Full => Some(0),
                Span::Masked => (0..batch.seq_len[bi].min(t))
                    .find(|&ti| (0..f).any(|fi| batch.mask[(bi * t + ti) * f + fi] != 0)),
            })
            .collect();
        (0..=layers)
            .map(|lvl| {
                let starts = first
                    .iter()
                    .zip(&batch.seq_len)
                    .map(|(fb, &len)| match fb {
                        Some(fb) => fb.saturating_sub(r * (layers - lvl)),
                        None => len,
                    })
                    .collect();
                Grid::new(f, starts, batch.seq_len.iter().map(|&l| l.min(t)).collect())
            })
            .collect()
    }

    fn embed(&self, z: &Tensor3, batch: &MaskedBatch, k: usize, g: &Grid) -> (Mat, EmbedCache) {
        let p = &self.params;
        let c = self.config.embed_dim;
        let (wv, bv) = (p.value(self.ids.value_w), p.value(self.ids.value_b));
        let (te, fe, se, me) = (
            p.value(self.ids.time),
            p.value(self.ids.feature),
            p.value(self.ids.step),
            p.value(self.ids.mask),
        );
        let coords = g.coords();
        let mut h = Mat::zeros(coords.len(), c);
        let mut zs = Vec::with_capacity(coords.len());
        let mut ms = Vec::with_capacity(coords.len());
        for (i, &(b, t, f)) in coords.iter().enumerate() {
            let zv = z.get(b, t, f);
            let m = usize::from(batch.mask[z.idx(b, t, f)] != 0);
            zs.push(zv);
            ms.push(m);
            let row = h.row_mut(i);
            for j in 0..c {
                row[j] = zv * wv[j] + bv[j] + te[t * c + j] + fe[f * c + j] + se[k * c + j] + me[m * c + j];
            }
        }
        (h, EmbedCache { z: zs, coords, mask: ms, k })
    }

    fn cell_forward(
        &self,
        x: &Mat,
        ids: &CellIds,
        g_in: &Grid,
        g_out: &Grid,
        mut rng: Option<&mut CdmRng>,
    ) -> (Mat, CellCache) {
        let p = &self.params;
        let qmap = g_in.map_from(g_out);
        let (a, mix) = match ids.mix {
            MixIds::Rsa(r) => {
                let (a, cache) = self.rsa_forward(x, &r, g_in, g_out, &qmap);
                (a, MixCache::Rsa(cache))
            }
            MixIds::Mlp(m) => {
                let xg = gather_rows(x, &qmap);
                let (a, cache) = mlp_forward(p, &m, xg, Act::Silu);
                (a, MixCache::Mlp(cache))
            }
        };
        let drop_p = if rng.is_some() { self.config.dropout } else { 0.0 };
        let (a, drop1) = match rng.as_deref_mut() {
            Some(r) => dropout(&a, drop_p, r),
            None => (a, Vec::new()),
        };
        let mut s1 = gather_rows(x, &qmap);
        s1.add_assign(&a);
        let (g, b) = (p.value(ids.ln_g), p.value(ids.ln_b));
        let (x1, ln1) = layer_norm(&s1, g, b);
        let (f, ff) = mlp_forward(p, &ids.ff, x1.clone(), Act::Relu);
        let (f, drop2) = match rng {
            Some(r) => dropout(&f, drop_p, r),
            None => (f, Vec::new()),
        };
        let mut s2 = x1;
        s2.add_assign(&f);
        let (x2, ln2) = layer_norm(&s2, g, b);
        let cache = CellCache { mix, qmap, in_rows: x.rows, drop1, ln1, ff, drop2, ln2 };
        (x2, cache)
    }

    fn rsa_forward(&self, x: &Mat, ids: &RsaIds, g_in: &Grid, g_out: &Grid, qmap: &[usize]) -> (Mat, RsaCache) {
        let p = &self.params;
        let c = self.config.embed_dim;
        let heads = self.config.num_heads;
        let [kt, kf] = self.config.kernel_size;
        let n_off = kt * kf;
        let pre1 = linear(x, p.value(ids.proj1), None, c);
        let act1 = silu(&pre1);
        let qkv = linear(&act1, p.value(ids.proj2), None, 3 * c);
        let (q, qn) = l2_normalize_heads(&qkv, 0, c, heads);
        let (k, kn) = l2_normalize_heads(&qkv, c, c, heads);
        let (v, vn) = l2_normalize_heads(&qkv, 2 * c, c, heads);
        // Convolved keys and values are only needed within reach of an output row.
        let starts = g_in
            .starts
            .iter()
            .zip(&g_out.starts)
            .zip(&g_in.lens)
            .map(|((&si, &so), &len)| if so >= len { len } else { si.max(so.saturating_sub(kt / 2)) })
            .collect();
        let g_mid = Grid::new(g_in.f, starts, g_in.lens.clone());
        let nbr_conv = g_mid.neighbors_in(g_in, kt, kf);
        let nbr_rel = g_out.neighbors_in(&g_mid, kt, kf);
        let gk = head_conv(&k, &nbr_conv, n_off, p.value(ids.h1_w), p.value(ids.h1_b), heads);
        let av = head_conv(&v, &nbr_conv, n_off, p.value(ids.h2_w), p.value(ids.h2_b), heads);
        let out = relational(&q, qmap, &gk, &av, &nbr_rel, n_off, heads);
        let cache = RsaCache { x: x.clone(), pre1, act1, q, qn, k, kn, v, vn, gk, av, nbr_conv, nbr_rel };
        (out, cache)
    }
}

fn add_mlp(ps: &mut ParamStore, prefix: &str, c: usize, hidden: usize, rng: &mut CdmRng) -> MlpIds {
    let tn = Init::TruncNormal(INIT_SD);
    MlpIds {
        w1: ps.add(&format!("{prefix}.w1"), &[c, hidden], tn, rng),
        b1: Some(ps.add(&format!("{prefix}.b1"), &[hidden], Init::Zeros, rng)),
        w2: ps.add(&format!("{prefix}.w2"), &[hidden, c], tn, rng),
        b2: Some(ps.add(&format!("{prefix}.b2"), &[c], Init::Zeros, rng)),
        hidden,
    }
}

fn mlp_forward(p: &ParamStore, ids: &MlpIds, x: Mat, act: Act) -> (Mat, MlpCache) {
    let c = x.cols;
    let pre = linear(&x, p.value(ids.w1), ids.b1.map(|b| p.value(b)), ids.hidden);
    let a = match act {
        Act::Relu => relu(&pre),
        Act::Silu => silu(&pre),
    };
    let y = linear(&a, p.value(ids.w2), ids.b2.map(|b| p.value(b)), c);
    (y, MlpCache { x, pre, act: a })
}

fn mlp_backward(ps: &mut ParamStore, ids: &MlpIds, cache: &MlpCache, dy: &Mat, act: Act) -> Mat {
    let da = lin_back(ps, ids.w2, ids.b2, &cache.act, dy);
    let dpre = match act {
        Act::Relu => relu_backward(&cache.pre, &da),
        Act::Silu => silu_backward(&cache.pre, &da),
    };
    lin_back(ps, ids.w1, ids.b1, &cache.x, &dpre)
}

fn lin_back(ps: &mut ParamStore, w: ParamId, b: Option<ParamId>, x: &Mat, dy: &Mat) -> Mat {
    let mut db = b.map(|b| vec![0.0; ps.value(b).len()]);
    let dx = {
        let (wv, dw) = ps.value_grad(w);
        let wv = wv.to_vec();
        linear_backward(x, &wv, dy, dw, db.as_deref_mut())
    };
    if let (Some(b), Some(db)) = (b, db) {
        add_into(ps.grad_mut(b), &db);
    }
    dx
}

fn add_into(acc: &mut [f64], d: &[f64]) {
    for (a, b) in acc.iter_mut().zip(d) {
        *a += *b;
    }
}

fn ln_back(ps: &mut ParamStore, g: ParamId, b: ParamId, cache: &LayerNormCache, dy: &Mat) -> Mat {
    let gv = ps.value(g).to_vec();
    let mut dg = vec![0.0; gv.len()];
    let mut db = vec![0.0; gv.len()];
    let dx = layer_norm_backward(cache, &gv, dy, &mut dg, &mut db);
    add_into(ps.grad_mut(g), &dg);
    add_into(ps.grad_mut(b), &db);
    dx
}

fn cell_backward(ps: &mut ParamStore, ids: &CellIds, cache: CellCache, dx2: &Mat, heads: usize, c: usize) -> Mat {
    let ds2 = ln_back(ps, ids.ln_g, ids.ln_b, &cache.ln2, dx2);
    let df = dropout_backward(&ds2, &cache.drop2);
    let mut dx1 = mlp_backward(ps, &ids.ff, &cache.ff, &df, Act::Relu);
    dx1.add_assign(&ds2);
    let ds1 = ln_back(ps, ids.ln_g, ids.ln_b, &cache.ln1, &dx1);
    let da = dropout_backward(&ds1, &cache.drop1);
    let mut dx = scatter_rows(&ds1, &cache.qmap, cache.in_rows);
    match (ids.mix, cache.mix) {
        (MixIds::Rsa(r), MixCache::Rsa(rc)) => dx.add_assign(&rsa_backward(ps, &r, &rc, &cache.qmap, &da, heads, c)),
        (MixIds::Mlp(m), MixCache::Mlp(mc)) => {
            let dxg = mlp_backward(ps, &m, &mc, &da, Act::Silu);
            dx.add_assign(&scatter_rows(&dxg, &cache.qmap, cache.in_rows));
        }
        _ => unreachable!("cache kind matches parameter kind"),
    }
    dx
}

fn rsa_backward(
    ps: &mut ParamStore,
    ids: &RsaIds,
    cache: &RsaCache,
    qmap: &[usize],
    dout: &Mat,
    heads: usize,
    c: usize,
) -> Mat {
    let n_off = cache.nbr_rel.len() / qmap.len().max(1);
    let (dq, dgk, dav) = relational_backward(
        &cache.q,
        qmap,
        &cache.gk,
        &cache.av,
        &cache.nbr_rel,
        n_off,
        heads,
        dout,
    );
    let conv_back = |ps: &mut ParamStore, w: ParamId, b: ParamId, x: &Mat, dy: &Mat| {
        let wv = ps.value(w).to_vec();
        let mut dw = vec![0.0; wv.len()];
        let mut db = vec![0.0; c];
        let dx = head_conv_backward(x, &cache.nbr_conv, n_off, &wv, dy, &mut dw, &mut db, heads);
        add_into(ps.grad_mut(w), &dw);
        add_into(ps.grad_mut(b), &db);
        dx
    };
    let dk = conv_back(ps, ids.h1_w, ids.h1_b, &cache.k, &dgk);
    let dv = conv_back(ps, ids.h2_w, ids.h2_b, &cache.v, &dav);
    let mut dqkv = Mat::zeros(cache.x.rows, 3 * c);
    l2_normalize_heads_backward(&cache.q, &cache.qn, &dq, heads, &mut dqkv, 0);
    l2_normalize_heads_backward(&cache.k, &cache.kn, &dk, heads, &mut dqkv, c);
    l2_normalize_heads_backward(&cache.v, &cache.vn, &dv, heads, &mut dqkv, 2 * c);
    let dact = lin_back(ps, ids.proj2, None, &cache.act1, &dqkv);
    let dpre = silu_backward(&cache.pre1, &dact);
    lin_back(ps, ids.proj1, None, &cache.x, &dpre)
}

fn embed_backward(ps: &mut ParamStore, ids: &Ids, cache: &EmbedCache, dh: &Mat) {
    let c = dh.cols;
    let mut dwv = vec![0.0; c];
    let mut dbv = vec![0.0; c];
    let mut dstep = vec![0.0; c];
    for (i, &(_, t, f)) in cache.coords.iter().enumerate() {
        let d = dh.row(i);
        let zv = cache.z[i];
        for j in 0..c {
            dwv[j] += zv * d[j];
            dbv[j] += d[j];
            dstep[j] += d[j];
        }
        add_into(&mut ps.grad_mut(ids.time)[t * c..(t + 1) * c], d);
        add_into(&mut ps.grad_mut(ids.feature)[f * c..(f + 1) * c], d);
        let m = cache.mask[i];
        add_into(&mut ps.grad_mut(ids.mask)[m * c..(m + 1) * c], d);
    }
    add_into(ps.grad_mut(ids.value_w), &dwv);
    add_into(ps.grad_mut(ids.value_b), &dbv);
    let k = cache.k;
    add_into(&mut ps.grad_mut(ids.step)[k * c..(k + 1) * c], &dstep);
}

fn check_finite(m: &Mat, layer: &str) -> Result<()> {
    if m.all_finite() {
        Ok(())
    } else {
        Err(CdmError::Numeric { layer: layer.to_string(), detail: "non-finite activation".into() })
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;

    use super::*;

    fn micro_config(backbone: Backbone) -> DenoiserConfig {
        DenoiserConfig {
            embed_dim: 8,
            residual_layers: 2,
            num_heads: 2,
            kernel_size: [3, 7],
            ff_dim: 12,
            encoder_cells: 2,
            dropout: 0.0,
            backbone,
            num_features: 4,
            max_time: 8,
            diffusion_steps: 5,
        }
    }

    /// Perturbs every weight so that biases and norms are not at their trivial init.
    fn jitter(d: &mut Denoiser, seed: u64) {
        let mut rng = CdmRng::seed_from_u64(seed);
        for p in &mut d.params.params {
            for v in &mut p.value {
                *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    fn random_mat(rows: usize, cols: usize, rng: &mut CdmRng) -> Mat {
        Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect())
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
    }

    fn dot(a: &Mat, b: &Mat) -> f64 {
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
    }

    /// Checks `∂(w·f(x))/∂x` and `∂/∂θ` for every parameter in `params` by
    /// central differences.
    fn check_layer<Fw, Bw>(d: &mut Denoiser, x: &Mat, w: &Mat, params: &[ParamId], fwd: Fw, bwd: Bw, tol: f64)
    where
        Fw: Fn(&Denoiser, &Mat) -> Mat,
        Bw: Fn(&mut Denoiser, &Mat, &Mat) -> Mat,
    {
        let h = 1e-6;
        d.params.zero_grads();
        let dx = bwd(d, x, w);
        let mut worst: f64 = 0.0;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += h;
            let mut xm = x.clone();
            xm.data[i] -= h;
            let num = (dot(&fwd(d, &xp), w) - dot(&fwd(d, &xm), w)) / (2.0 * h);
            worst = worst.max(rel_err(dx.data[i], num));
        }
        for &id in params {
            for i in 0..d.params.params[id.0].value.len() {
                let orig = d.params.params[id.0].value[i];
                d.params.params[id.0].value[i] = orig + h;
                let fp = dot(&fwd(d, x), w);
                d.params.params[id.0].value[i] = orig - h;
                let fm = dot(&fwd(d, x), w);
                d.params.params[id.0].value[i] = orig;
                let num = (fp - fm) / (2.0 * h);
                worst = worst.max(rel_err(d.params.params[id.0].grad[i], num));
            }
        }
        assert!(worst < tol, "worst relative error {worst}");
    }

    fn rsa_ids(d: &Denoiser) -> RsaIds {
        match d.ids.blocks[0].cells[0].mix {
            MixIds::Rsa(r) => r,
            MixIds::Mlp(_) => unreachable!(),
        }
    }

    #[test]
    fn rsa_gradients_match_finite_differences() {
        let cfg = DenoiserConfig { num_features: 2, ..micro_config(Backbone::Rsa) };
        let mut d = Denoiser::new(cfg, 3).unwrap();
        jitter(&mut d, 4);
        let grid = Grid::new(2, vec![0, 0], vec![3, 3]);
        let mut rng = CdmRng::seed_from_u64(5);
        let x = random_mat(grid.total, 8, &mut rng);
        let w = random_mat(grid.total, 8, &mut rng);
        let ids = rsa_ids(&d);
        let qmap: Vec<usize> = (0..grid.total).collect();
        let params = [ids.proj1, ids.proj2, ids.h1_w, ids.h1_b, ids.h2_w, ids.h2_b];
        check_layer(
            &mut d,
            &x,
            &w,
            &params,
            |d, x| d.rsa_forward(x, &rsa_ids(d), &grid, &grid, &qmap).0,
            |d, x, w| {
                let ids = rsa_ids(d);
                let (_, cache) = d.rsa_forward(x, &ids, &grid, &grid, &qmap);
                rsa_backward(&mut d.params, &ids, &cache, &qmap, w, 2, 8)
            },
            1e-4,
        );
    }

    #[test]
    fn encoder_cell_gradients_match_finite_differences() {
        let cfg = DenoiserConfig { num_features: 2, ..micro_config(Backbone::Rsa) };
        let mut d = Denoiser::new(cfg, 6).unwrap();
        jitter(&mut d, 7);
        let g_in = Grid::new(2, vec![0, 0], vec![4, 3]);
        let g_out = Grid::new(2, vec![2, 1], vec![4, 3]);
        let mut rng = CdmRng::seed_from_u64(8);
        let x = random_mat(g_in.total, 8, &mut rng);
        let w = random_mat(g_out.total, 8, &mut rng);
        let cell = d.ids.blocks[0].cells[0].clone();
        let mut params = vec![cell.ln_g, cell.ln_b, cell.ff.w1, cell.ff.w2];
        params.extend([cell.ff.b1.unwrap(), cell.ff.b2.unwrap()]);
        let r = rsa_ids(&d);
        params.extend([r.proj1, r.proj2, r.h1_w, r.h1_b, r.h2_w, r.h2_b]);
        check_layer(
            &mut d,
            &x,
            &w,
            &params,
            |d, x| d.cell_forward(x, &d.ids.blocks[0].cells[0], &g_in, &g_out, None).0,
            |d, x, w| {
                let ids = d.ids.blocks[0].cells[0].clone();
                let (_, cache) = d.cell_forward(x, &ids, &g_in, &g_out, None);
                cell_backward(&mut d.params, &ids, cache, w, 2, 8)
            },
            1e-4,
        );
    }

    fn micro_batch(seed: u64) -> (MaskedBatch, Tensor3) {
        let mut rng = CdmRng::seed_from_u64(seed);
        let (b, t, f) = (2, 6, 4);
        let data: Vec<f64> = (0..b * t * f).map(|_| rng.random::<f64>()).collect();
        let mut mask = vec![0u8; b * t * f];
        mask[5 * f] = 1;
        mask[(t + 3) * f] = 1;
        mask[(t + 3) * f + 2] = 1;
        let mut data = Tensor3::from_vec(b, t, f, data).unwrap();
        for ti in 4..t {
            for fi in 0..f {
                data.set(1, ti, fi, 0.0);
            }
        }
        let batch = MaskedBatch::new(data.clone(), mask, vec![6, 4]).unwrap();
        let z = Tensor3::from_vec(b, t, f, (0..b * t * f).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
        (batch, z)
    }

    fn masked_loss(d: &Denoiser, z: &Tensor3, batch: &MaskedBatch, eps: &Tensor3, span: Span) -> f64 {
        let pred = d.predict(z, batch, 3, span).unwrap();
        crate::diffusion::masked_mse(&pred, eps, &batch.mask).0
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for backbone in [Backbone::Rsa, Backbone::FeedForward] {
            let mut d = Denoiser::new(micro_config(backbone), 9).unwrap();
            jitter(&mut d, 10);
            let (batch, z) = micro_batch(11);
            let mut rng = CdmRng::seed_from_u64(12);
            let eps = Tensor3::from_vec(2, 6, 4, (0..48).map(|_| rng.sample(StandardNormal)).collect()).unwrap();
            for span in [Span::Full, Span::Masked] {
                d.params.zero_grads();
                let (pred, tape) = d.forward(&z, &batch, 3, span, None).unwrap();
                let grad = crate::diffusion::noise::masked_mse_grad(&pred, &eps, &batch.mask);
                d.backward(tape, &grad);
                let total: usize = d.params.params.iter().map(|p| p.value.len()).sum();
                let mut worst: f64 = 0.0;
                for _ in 0..20 {
                    let mut flat = rng.random_range(0..total);
                    let mut pi = 0;
                    while flat >= d.params.params[pi].value.len() {
                        flat -= d.params.params[pi].value.len();
                        pi += 1;
                    }
                    let orig = d.params.params[pi].value[flat];
                    d.params.params[pi].value[flat] = orig + 1e-6;
                    let lp = masked_loss(&d, &z, &batch, &eps, span);
                    d.params.params[pi].value[flat] = orig - 1e-6;
                    let lm = masked_loss(&d, &z, &batch, &eps, span);
                    d.params.params[pi].value[flat] = orig;
                    let num = (lp - lm) / 2e-6;
                    worst = worst.max(rel_err(d.params.params[pi].grad[flat], num));
                }
                assert!(worst < 1e-3, "{backbone:?} {span:?}: worst relative error {worst}");
            }
        }
    }

    #[test]
    fn masked_span_matches_full_pass_on_masked_entries() {
        let mut d = Denoiser::new(micro_config(Backbone::Rsa), 13).unwrap();
        jitter(&mut d, 14);
        let (batch, z) = micro_batch(15);
        let full = d.predict(&z, &batch, 2, Span::Full).unwrap();
        let part = d.predict(&z, &batch, 2, Span::Masked).unwrap();
        for (i, m) in batch.mask.iter().enumerate() {
            if *m != 0 {
                assert!((full.data[i] - part.data[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eval_mode_is_deterministic_and_train_mode_is_not() {
        let cfg = DenoiserConfig { dropout: 0.5, ..micro_config(Backbone::Rsa) };
        let d = Denoiser::new(cfg, 16).unwrap();
        let (batch, z) = micro_batch(17);
        let a = d.predict(&z, &batch, 1, Span::Full).unwrap();
        let b = d.predict(&z, &batch, 1, Span::Full).unwrap();
        assert_eq!(a, b);
        let mut rng = CdmRng::seed_from_u64(1);
        let c = d.forward(&z, &batch, 1, Span::Full, Some(&mut rng)).unwrap().0;
        assert_ne!(a, c);
    }

    #[test]
    fn zero_weights_give_zero_attention() {
        let mut d = Denoiser::new(micro_config(Backbone::Rsa), 18).unwrap();
        for p in &mut d.params.params {
            p.value.iter_mut().for_each(|v| *v = 0.0);
        }
        let grid = Grid::new(4, vec![0], vec![5]);
        let mut rng = CdmRng::seed_from_u64(19);
        let x = random_mat(grid.total, 8, &mut rng);
        let qmap: Vec<usize> = (0..grid.total).collect();
        let out = d.rsa_forward(&x, &rsa_ids(&d), &grid, &grid, &qmap).0;
        assert!(out.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn cell_with_zero_branches_is_double_layer_norm() {
        let mut d = Denoiser::new(micro_config(Backbone::Rsa), 20).unwrap();
        let cell = d.ids.blocks[0].cells[0].clone();
        let r = rsa_ids(&d);
        for id in [r.proj1, r.proj2, r.h1_w, r.h2_w, cell.ff.w1, cell.ff.w2] {
            d.params.params[id.0].value.iter_mut().for_each(|v| *v = 0.0);
        }
        let grid = Grid::new(4, vec![0], vec![3]);
        let mut rng = CdmRng::seed_from_u64(21);
        let x = random_mat(grid.total, 8, &mut rng);
        let y = d.cell_forward(&x, &cell, &grid, &grid, None).0;
        let ones = vec![1.0; 8];
        let zeros = vec![0.0; 8];
        let once = layer_norm(&x, &ones, &zeros).0;
        let twice = layer_norm(&once, &ones, &zeros).0;
        for (a, b) in y.data.iter().zip(&twice.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn step_embedding_is_an_additive_offset() {
        let d = Denoiser::new(micro_config(Backbone::Rsa), 22).unwrap();
        let (batch, z) = micro_batch(23);
        let grid = Grid::new(4, vec![0, 0], vec![6, 4]);
        let a = d.embed(&z, &batch, 1, &grid).0;
        let b = d.embed(&z, &batch, 4, &grid).0;
        let se = d.params.value(d.ids.step);
        for r in 0..a.rows {
            for j in 0..8 {
                let diff = b.row(r)[j] - a.row(r)[j];
                assert!((diff - (se[4 * 8 + j] - se[8 + j])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parameter_count_is_fixed_by_config() {
        let a = Denoiser::new(DenoiserConfig::default(), 1).unwrap();
        let b = Denoiser::new(DenoiserConfig::default(), 2).unwrap();
        assert_eq!(a.num_params(), b.num_params());
        assert!(a.num_params() > 0);
    }

    #[test]
    fn normalized_heads_have_unit_norm() {
        let mut rng = CdmRng::seed_from_u64(24);
        let x = random_mat(10, 24, &mut rng);
        let (y, _) = l2_normalize_heads(&x, 8, 8, 2);
        for r in 0..10 {
            for h in 0..2 {
                let n: f64 = y.row(r)[h * 4..(h + 1) * 4].iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn bad_shapes_rejected() {
        let d = Denoiser::new(micro_config(Backbone::Rsa), 25).unwrap();
        let (batch, z) = micro_batch(26);
        assert!(matches!(d.predict(&z, &batch, 6, Span::Full), Err(CdmError::Index(_))));
        let other = Tensor3::zeros(2, 6, 3);
        assert!(matches!(d.predict(&other, &batch, 1, Span::Full), Err(CdmError::Shape(_))));
        assert!(DenoiserConfig { embed_dim: 9, ..micro_config(Backbone::Rsa) }.validate().is_err());
        assert!(DenoiserConfig { kernel_size: [2, 7], ..micro_config(Backbone::Rsa) }.validate().is_err());
    }
}
