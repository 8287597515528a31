//! Central finite-difference checks of the reverse sweep.
//!
//! Errors are `|g - fd| / max(|g|, |fd|, 1e-3)`; the floor keeps entries
//! whose true derivative is near zero from dominating through round-off.

use rand::Rng as _;

use crate::diffnum::{rel_err, Array, AttentionVars, ParamId, ParamStore, Tape, Var};
use crate::error::Result;
use crate::model::{DecodeMode, Model};
use crate::problems::ProblemInstance;
use crate::rng::{self, Purpose};

pub const STEP: f64 = 1e-5;
pub const FLOOR: f64 = 1e-3;

/// Builds a scalar from parameters on a fresh tape.
pub type Builder = dyn Fn(&mut Tape, &ParamStore) -> Result<Var>;

/// Largest relative error over every entry of every parameter.
pub fn fd_check(store: &ParamStore, f: &Builder) -> Result<f64> {
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.gradient(out)?;
    let mut worst: f64 = 0.0;
    for id in store.ids() {
        for e in 0..store.get(id).data().len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[e] += delta;
                let mut t = Tape::new();
                let o = f(&mut t, &s)?;
                Ok(t.scalar(o))
            };
            let fd = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let g = grads.get(id).map_or(0.0, |g| g.data()[e]);
            worst = worst.max(rel_err(g, fd, FLOOR));
        }
    }
    Ok(worst)
}

fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
    let mut r = rng::stream(seed, Purpose::Harness, 0, 0);
    let mut s = ParamStore::new();
    for &(name, rows, cols) in shapes {
        let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
        s.insert(name, Array::new(rows, cols, data).expect("consistent shape"));
    }
    s
}

type Case = (&'static str, Box<Builder>, Vec<(&'static str, usize, usize)>);

fn cases() -> Vec<Case> {
    vec![
        (
            "matmul/tanh/sum",
            Box::new(|t, s| {
                let a = t.param(s, ParamId(0));
                let b = t.param(s, ParamId(1));
                let m = t.matmul(a, b)?;
                let m = t.tanh(m);
                Ok(t.sum(m))
            }),
            vec![("a", 3, 4), ("b", 4, 2)],
        ),
        (
            "matmul_t/exp/mean",
            Box::new(|t, s| {
                let a = t.param(s, ParamId(0));
                let b = t.param(s, ParamId(1));
                let m = t.matmul_t(a, b)?;
                let m = t.exp(m);
                let m = t.mean_rows(m);
                Ok(t.sum(m))
            }),
            vec![("a", 3, 4), ("b", 5, 4)],
        ),
        (
            "add/sub/mul/scale/add_row/add_scalar",
            Box::new(|t, s| {
                let a = t.param(s, ParamId(0));
                let b = t.param(s, ParamId(1));
                let r = t.param(s, ParamId(2));
                let x = t.add(a, b)?;
                let y = t.sub(a, b)?;
                let z = t.mul(x, y)?;
                let z = t.scale(z, 0.7);
                let z = t.add_row(z, r)?;
                let z = t.add_scalar(z, 0.1);
                let z = t.mul(z, z)?;
                Ok(t.sum(z))
            }),
            vec![("a", 3, 2), ("b", 3, 2), ("r", 1, 2)],
        ),
        (
            "concat/slice/gather/log/relu",
            Box::new(|t, s| {
                let a = t.param(s, ParamId(0));
                let b = t.param(s, ParamId(1));
                let c = t.concat_cols(&[a, b])?;
                let d = t.concat_rows(&[c, c])?;
                let e = t.slice_cols(d, 1, 3)?;
                let g = t.gather_rows(e, &[3, 0, 0])?;
                let h = t.relu(g);
                let h = t.exp(h);
                let l = t.log(h)?;
                let q = t.mul(l, g)?;
                Ok(t.sum(q))
            }),
            vec![("a", 2, 2), ("b", 2, 3)],
        ),
        (
            "masked_softmax/pick/log",
            Box::new(|t, s| {
                let a = t.param(s, ParamId(0));
                let p = t.masked_softmax(a, Some(&[true, false, true, true, true, true, false, true]))?;
                let p1 = t.pick(p, 0, 2)?;
                let p2 = t.pick(p, 1, 3)?;
                let l1 = t.log(p1)?;
                let l2 = t.log(p2)?;
                t.mul(l1, l2)
            }),
            vec![("a", 2, 4)],
        ),
        (
            "instance_norm",
            Box::new(|t, s| {
                let x = t.param(s, ParamId(0));
                let g = t.param(s, ParamId(1));
                let b = t.param(s, ParamId(2));
                let w = t.param(s, ParamId(3));
                let y = t.instance_norm(x, g, b)?;
                let y = t.matmul(y, w)?;
                let y = t.tanh(y);
                Ok(t.sum(y))
            }),
            vec![("x", 5, 3), ("g", 1, 3), ("b", 1, 3), ("w", 3, 2)],
        ),
        (
            "multi_head_attention",
            Box::new(|t, s| {
                let q = t.param(s, ParamId(0));
                let kv = t.param(s, ParamId(1));
                let w = AttentionVars {
                    wq: t.param(s, ParamId(2)),
                    wk: t.param(s, ParamId(3)),
                    wv: t.param(s, ParamId(4)),
                    wo: t.param(s, ParamId(5)),
                };
                let o = t.multi_head_attention(q, kv, &w, 2)?;
                let o = t.tanh(o);
                Ok(t.sum(o))
            }),
            vec![
                ("q", 2, 3),
                ("kv", 4, 4),
                ("wq", 3, 4),
                ("wk", 4, 4),
                ("wv", 4, 4),
                ("wo", 4, 4),
            ],
        ),
        (
            "three_layer_composition",
            Box::new(|t, s| {
                let [x, w1, b1, w2, w3] = [0, 1, 2, 3, 4].map(|i| t.param(s, ParamId(i)));
                let h = t.matmul(x, w1)?;
                let h = t.add_row(h, b1)?;
                let h = t.tanh(h);
                let h = t.matmul(h, w2)?;
                let h = t.tanh(h);
                let h = t.matmul(h, w3)?;
                let h = t.exp(h);
                Ok(t.sum(h))
            }),
            vec![("x", 4, 3), ("w1", 3, 5), ("b1", 1, 5), ("w2", 5, 5), ("w3", 5, 1)],
        ),
    ]
}

/// Every primitive group on random inputs drawn from `seed`.
pub fn primitive_checks(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(i, (name, f, shapes))| Ok((name, fd_check(&store_with(&shapes, seed + i as u64), f.as_ref())?)))
        .collect()
}

/// `log p_θ(y | x, z) + log p_φ(z | x)` differentiated end to end through
/// encoder and decoder, for a sampled `(z, y)`. Up to `per_param` evenly
/// spaced entries of each parameter are checked.
pub fn log_prob_check(model: &Model, instance: &ProblemInstance, seed: u64, per_param: usize) -> Result<f64> {
    let enc = model.encode(instance)?;
    let cache = model.decoder_cache(&enc)?;
    let mut r = rng::stream(seed, Purpose::Rollout, 0, 0);
    let z = enc.sample(&mut r).z;
    let visits = cache.rollout(&z, instance, &mut r, DecodeMode::Sample)?.solution.visits;
    let f = |m: &Model, t: &mut Tape| -> Result<Var> {
        let e = m.encode_on(t, instance)?;
        let d = m.decoder_on(t, e.nodes)?;
        let zv = t.constant(Array::row_vector(z.clone()));
        let lp = m.log_prob_on(t, &d, zv, instance, &visits)?;
        let prior = m.prior_logdensity_on(t, &e, &z)?;
        t.add(lp, prior)
    };
    let mut tape = Tape::new();
    let out = f(model, &mut tape)?;
    let grads = tape.gradient(out)?;
    let mut worst: f64 = 0.0;
    for id in model.params.ids() {
        let len = model.params.get(id).data().len();
        for e in (0..len).step_by(len.div_ceil(per_param.max(1)).max(1)) {
            let eval = |h: f64| -> Result<f64> {
                let mut mm = model.clone();
                mm.params.get_mut(id).data_mut()[e] += h;
                let mut t = Tape::new();
                let o = f(&mm, &mut t)?;
                Ok(t.scalar(o))
            };
            let fd = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            let g = grads.get(id).map_or(0.0, |g| g.data()[e]);
            worst = worst.max(rel_err(g, fd, FLOOR));
        }
    }
    Ok(worst)
}
