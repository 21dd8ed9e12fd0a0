//! Head networks with hand-written backpropagation in f64.
//!
//! Every parameter is a 2-d array in a [`Store`]; biases and norm gains are
//! `1 x n` rows. Forward passes return the logits plus a cache that the
//! matching backward pass consumes.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{HeadConfig, HeadKind, InputLayout};
use crate::fusion::SequenceMode;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub(crate) struct P(usize);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub(crate) struct Store {
    pub names: Vec<String>,
    pub values: Vec<Array2<f64>>,
    #[serde(skip)]
    pub grads: Vec<Array2<f64>>,
}

impl Store {
    fn add(&mut self, name: String, value: Array2<f64>) -> P {
        self.names.push(name);
        self.values.push(value);
        P(self.values.len() - 1)
    }

    fn uniform(&mut self, name: String, shape: (usize, usize), bound: f64, rng: &mut ChaCha8Rng) -> P {
        let v = Array2::from_shape_fn(shape, |_| rng.random_range(-bound..=bound));
        self.add(name, v)
    }

    pub fn v(&self, p: P) -> &Array2<f64> {
        &self.values[p.0]
    }

    fn g(&mut self, p: P) -> &mut Array2<f64> {
        &mut self.grads[p.0]
    }

    pub fn zero_grad(&mut self) {
        if self.grads.len() != self.values.len() {
            self.grads = self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        } else {
            self.grads.iter_mut().for_each(|g| g.fill(0.0));
        }
    }

    pub fn num_params(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.values.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn flat_grad(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|v| v.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "flat parameter length");
        let mut i = 0;
        for v in &mut self.values {
            for x in v.iter_mut() {
                *x = flat[i];
                i += 1;
            }
        }
    }
}

fn row_sum(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Linear {
    w: P,
    b: P,
}

impl Linear {
    /// Uniform(±1/sqrt(fan_in)) weights and bias.
    fn new(store: &mut Store, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        Self {
            w: store.uniform(format!("{name}.weight"), (fan_in, fan_out), bound, rng),
            b: store.uniform(format!("{name}.bias"), (1, fan_out), bound, rng),
        }
    }

    fn forward(&self, st: &Store, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(st.v(self.w)) + st.v(self.b)
    }

    fn backward(&self, st: &mut Store, x: ArrayView2<f64>, dy: &Array2<f64>) -> Array2<f64> {
        *st.g(self.w) += &x.t().dot(dy);
        *st.g(self.b) += &row_sum(dy);
        dy.dot(&st.v(self.w).t())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct LayerNorm {
    gain: P,
    bias: P,
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    fn new(store: &mut Store, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.weight"), Array2::ones((1, width))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, width))),
        }
    }

    fn forward(&self, st: &Store, x: &Array2<f64>) -> (Array2<f64>, LnCache) {
        let n = x.ncols() as f64;
        let mean = x.sum_axis(Axis(1)) / n;
        let centered = x - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / n;
        let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
        let xhat = centered * inv_std.view().insert_axis(Axis(1));
        let y = &xhat * st.v(self.gain) + st.v(self.bias);
        (y, LnCache { xhat, inv_std })
    }

    fn backward(&self, st: &mut Store, c: &LnCache, dy: &Array2<f64>) -> Array2<f64> {
        *st.g(self.gain) += &row_sum(&(dy * &c.xhat));
        *st.g(self.bias) += &row_sum(dy);
        let dxhat = dy * st.v(self.gain);
        let n = dxhat.ncols() as f64;
        let m1 = dxhat.sum_axis(Axis(1)) / n;
        let m2 = (&dxhat * &c.xhat).sum_axis(Axis(1)) / n;
        let inner = dxhat - m1.view().insert_axis(Axis(1)) - &(&c.xhat * &m2.view().insert_axis(Axis(1)));
        inner * c.inv_std.view().insert_axis(Axis(1))
    }
}

/// Single-layer LSTM with gate order (input, forget, cell, output).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Lstm {
    wx: P,
    wh: P,
    b: P,
    hidden: usize,
}

struct LstmStep {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    c: Array2<f64>,
}

impl Lstm {
    fn new(store: &mut Store, name: &str, input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        Self {
            wx: store.uniform(format!("{name}.weight_ih"), (input, 4 * hidden), bound, rng),
            wh: store.uniform(format!("{name}.weight_hh"), (hidden, 4 * hidden), bound, rng),
            b: store.uniform(format!("{name}.bias"), (1, 4 * hidden), bound, rng),
            hidden,
        }
    }

    fn forward(&self, st: &Store, xs: &[&Array2<f64>]) -> (Vec<Array2<f64>>, Vec<LstmStep>) {
        let batch = xs[0].nrows();
        let hd = self.hidden;
        let mut h = Array2::zeros((batch, hd));
        let mut c = Array2::zeros((batch, hd));
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let z = x.dot(st.v(self.wx)) + h.dot(st.v(self.wh)) + st.v(self.b);
            let i = z.slice(s![.., ..hd]).mapv(sigmoid);
            let f = z.slice(s![.., hd..2 * hd]).mapv(sigmoid);
            let g = z.slice(s![.., 2 * hd..3 * hd]).mapv(f64::tanh);
            let o = z.slice(s![.., 3 * hd..]).mapv(sigmoid);
            let c_new = &f * &c + &i * &g;
            let h_new = &o * &c_new.mapv(f64::tanh);
            steps.push(LstmStep {
                x: (*x).clone(),
                h_prev: h,
                c_prev: c,
                i,
                f,
                g,
                o,
                c: c_new.clone(),
            });
            hs.push(h_new.clone());
            h = h_new;
            c = c_new;
        }
        (hs, steps)
    }

    /// `dhs[t]` is the loss gradient w.r.t. the output at step t.
    fn backward(&self, st: &mut Store, steps: &[LstmStep], dhs: &[Array2<f64>]) -> Vec<Array2<f64>> {
        let hd = self.hidden;
        let batch = steps[0].x.nrows();
        let mut dh_next = Array2::zeros((batch, hd));
        let mut dc_next = Array2::zeros((batch, hd));
        let mut dxs = vec![Array2::zeros((0, 0)); steps.len()];
        for t in (0..steps.len()).rev() {
            let sp = &steps[t];
            let dh = &dhs[t] + &dh_next;
            let tc = sp.c.mapv(f64::tanh);
            let d_o = &dh * &tc;
            let dc = &dc_next + &(&dh * &sp.o * &tc.mapv(|v| 1.0 - v * v));
            let di = &dc * &sp.g;
            let dg = &dc * &sp.i;
            let df = &dc * &sp.c_prev;
            dc_next = &dc * &sp.f;
            let mut dz = Array2::zeros((batch, 4 * hd));
            dz.slice_mut(s![.., ..hd]).assign(&(&di * &sp.i.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., hd..2 * hd]).assign(&(&df * &sp.f.mapv(|v| v * (1.0 - v))));
            dz.slice_mut(s![.., 2 * hd..3 * hd]).assign(&(&dg * &sp.g.mapv(|v| 1.0 - v * v)));
            dz.slice_mut(s![.., 3 * hd..]).assign(&(&d_o * &sp.o.mapv(|v| v * (1.0 - v))));
            *st.g(self.wx) += &sp.x.t().dot(&dz);
            *st.g(self.wh) += &sp.h_prev.t().dot(&dz);
            *st.g(self.b) += &row_sum(&dz);
            dxs[t] = dz.dot(&st.v(self.wx).t());
            dh_next = dz.dot(&st.v(self.wh).t());
        }
        dxs
    }
}

/// Scaled dot-product self-attention over tokens, mean-pooled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Option<Linear>,
    heads: usize,
    width: usize,
}

struct AttnCache {
    xs: Vec<Array2<f64>>,
    q: Vec<Array2<f64>>,
    k: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    /// `p[h][t][s]`: batch column of attention from token t to token s.
    p: Vec<Vec<Vec<Array1<f64>>>>,
    o: Vec<Array2<f64>>,
}

fn rowdot(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Array1<f64> {
    (&a * &b).sum_axis(Axis(1))
}

impl Attention {
    fn new(
        store: &mut Store,
        name: &str,
        input: usize,
        width: usize,
        heads: usize,
        out_proj: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), input, width, rng),
            k: Linear::new(store, &format!("{name}.k"), input, width, rng),
            v: Linear::new(store, &format!("{name}.v"), input, width, rng),
            out: out_proj.then(|| Linear::new(store, &format!("{name}.out"), width, width, rng)),
            heads,
            width,
        }
    }

    fn forward(&self, st: &Store, xs: &[&Array2<f64>]) -> (Array2<f64>, AttnCache) {
        let t_len = xs.len();
        let batch = xs[0].nrows();
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let q: Vec<_> = xs.iter().map(|x| self.q.forward(st, x.view())).collect();
        let k: Vec<_> = xs.iter().map(|x| self.k.forward(st, x.view())).collect();
        let v: Vec<_> = xs.iter().map(|x| self.v.forward(st, x.view())).collect();
        let mut o = vec![Array2::zeros((batch, self.width)); t_len];
        let mut p = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let mut ph = Vec::with_capacity(t_len);
            for t in 0..t_len {
                let scores: Vec<Array1<f64>> =
                    (0..t_len).map(|s_| rowdot(q[t].slice(cols), k[s_].slice(cols)) * scale).collect();
                let mut max = scores[0].clone();
                for sc in &scores[1..] {
                    max.zip_mut_with(sc, |m, &x| *m = m.max(x));
                }
                let mut e: Vec<Array1<f64>> = scores.iter().map(|sc| (sc - &max).mapv(f64::exp)).collect();
                let total = e.iter().fold(Array1::zeros(batch), |acc, x| acc + x);
                for x in &mut e {
                    *x /= &total;
                }
                let mut ot = o[t].slice_mut(cols);
                for (s_, w) in e.iter().enumerate() {
                    ot += &(&v[s_].slice(cols) * &w.view().insert_axis(Axis(1)));
                }
                ph.push(e);
            }
            p.push(ph);
        }
        let ys: Vec<Array2<f64>> = match &self.out {
            Some(l) => o.iter().map(|x| l.forward(st, x.view())).collect(),
            None => o.clone(),
        };
        let pooled = ys.iter().fold(Array2::zeros((batch, self.width)), |acc, y| acc + y) / t_len as f64;
        let cache = AttnCache {
            xs: xs.iter().map(|x| (*x).clone()).collect(),
            q,
            k,
            v,
            p,
            o,
        };
        (pooled, cache)
    }

    fn backward(&self, st: &mut Store, c: &AttnCache, dpooled: &Array2<f64>) -> Vec<Array2<f64>> {
        let t_len = c.xs.len();
        let batch = dpooled.nrows();
        let dh = self.width / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let dy = dpooled / t_len as f64;
        let d_o: Vec<Array2<f64>> = match &self.out {
            Some(l) => c.o.iter().map(|o| l.backward(st, o.view(), &dy)).collect(),
            None => vec![dy; t_len],
        };
        let zeros = || vec![Array2::<f64>::zeros((batch, self.width)); t_len];
        let (mut dq, mut dk, mut dv) = (zeros(), zeros(), zeros());
        for h in 0..self.heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            for t in 0..t_len {
                let dp: Vec<Array1<f64>> = (0..t_len).map(|s_| rowdot(d_o[t].slice(cols), c.v[s_].slice(cols))).collect();
                let pt = &c.p[h][t];
                let weighted = (0..t_len).fold(Array1::<f64>::zeros(batch), |acc, s_| acc + &(&pt[s_] * &dp[s_]));
                for s_ in 0..t_len {
                    let w = pt[s_].view().insert_axis(Axis(1));
                    let mut dvs = dv[s_].slice_mut(cols);
                    dvs += &(&d_o[t].slice(cols) * &w);
                    let ds = (&pt[s_] * &(&dp[s_] - &weighted)) * scale;
                    let ds = ds.view().insert_axis(Axis(1));
                    let mut dqt = dq[t].slice_mut(cols);
                    dqt += &(&c.k[s_].slice(cols) * &ds);
                    let mut dks = dk[s_].slice_mut(cols);
                    dks += &(&c.q[t].slice(cols) * &ds);
                }
            }
        }
        (0..t_len)
            .map(|t| {
                let x = c.xs[t].view();
                self.q.backward(st, x, &dq[t]) + self.k.backward(st, x, &dk[t]) + self.v.backward(st, x, &dv[t])
            })
            .collect()
    }

    /// Head-averaged column means of the attention matrix, per batch row.
    fn token_weights(c: &AttnCache) -> Array2<f64> {
        let heads = c.p.len();
        let t_len = c.xs.len();
        let batch = c.xs[0].nrows();
        let mut w = Array2::zeros((batch, t_len));
        for ph in &c.p {
            for pt in ph {
                for (s_, col) in pt.iter().enumerate() {
                    let mut ws = w.column_mut(s_);
                    ws += &(col / (heads * t_len) as f64);
                }
            }
        }
        w
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Tokens {
    PerBackbone(Vec<Linear>),
    Chunked,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
enum Body {
    Dense { norm: Option<LayerNorm>, fc: Linear },
    Seq {
        tokens: Tokens,
        norm: Option<LayerNorm>,
        fwd: Option<Lstm>,
        bwd: Option<Lstm>,
        attn: Option<Attention>,
    },
}

/// A head network: input stage, body and linear classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadNet {
    pub(crate) kind: HeadKind,
    pub(crate) store: Store,
    layout: InputLayout,
    n_classes: usize,
    dropout: f64,
    body: Body,
    classifier: Linear,
}

struct SeqCache {
    ln: Vec<LnCache>,
    toks: Vec<Array2<f64>>,
    fwd: Option<(Vec<Array2<f64>>, Vec<LstmStep>)>,
    bwd: Option<(Vec<Array2<f64>>, Vec<LstmStep>)>,
    seq: Vec<Array2<f64>>,
    attn: Option<AttnCache>,
}

enum BodyCache {
    Dense {
        ln: Option<LnCache>,
        input: Array2<f64>,
        pre: Array2<f64>,
    },
    Seq(SeqCache),
}

pub(crate) struct Cache {
    x: Array2<f64>,
    body: BodyCache,
    mask: Option<Array2<f64>>,
    rep: Array2<f64>,
}

impl HeadNet {
    pub fn new(config: &HeadConfig, n_classes: usize, layout: &InputLayout) -> Self {
        let mut rng = crate::seeds::rng_for("head-init", &[config.seed.into(), config.kind.as_str().into()]);
        let mut st = Store::default();
        let hd = config.hidden_dim;
        let d = layout.fusion.dim();
        let (body, rep_dim) = if config.kind == HeadKind::Dense {
            let norm = config.input_norm.then(|| LayerNorm::new(&mut st, "input_norm", d));
            let fc = Linear::new(&mut st, "fc", d, hd, &mut rng);
            (Body::Dense { norm, fc }, hd)
        } else {
            let d_tok = layout.token_width();
            let tokens = match layout.mode {
                SequenceMode::PerBackbone => Tokens::PerBackbone(
                    layout
                        .fusion
                        .segments
                        .iter()
                        .map(|sg| Linear::new(&mut st, &format!("tokens.{}", sg.backbone), sg.length, d_tok, &mut rng))
                        .collect(),
                ),
                SequenceMode::Chunked => Tokens::Chunked,
            };
            let norm = config.input_norm.then(|| LayerNorm::new(&mut st, "token_norm", d_tok));
            let recurrent = config.kind.recurrent();
            let fwd = recurrent.then(|| Lstm::new(&mut st, "lstm.fwd", d_tok, hd, &mut rng));
            let bwd = config.kind.bidirectional().then(|| Lstm::new(&mut st, "lstm.bwd", d_tok, hd, &mut rng));
            let seq_dim = match (recurrent, config.kind.bidirectional()) {
                (false, _) => d_tok,
                (true, false) => hd,
                (true, true) => 2 * hd,
            };
            let attn = config.kind.attention().then(|| {
                let heads = if config.kind == HeadKind::BilstmMha { config.attn_heads } else { 1 };
                Attention::new(&mut st, "attn", seq_dim, hd, heads, config.kind == HeadKind::BilstmMha, &mut rng)
            });
            let rep_dim = if attn.is_some() { hd } else { seq_dim };
            (
                Body::Seq {
                    tokens,
                    norm,
                    fwd,
                    bwd,
                    attn,
                },
                rep_dim,
            )
        };
        let classifier = Linear::new(&mut st, "classifier", rep_dim, n_classes, &mut rng);
        st.zero_grad();
        Self {
            kind: config.kind,
            store: st,
            layout: layout.clone(),
            n_classes,
            dropout: config.dropout,
            body,
            classifier,
        }
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    fn make_tokens(&self, tokens: &Tokens, x: &Array2<f64>) -> Vec<Array2<f64>> {
        match tokens {
            Tokens::PerBackbone(maps) => self
                .layout
                .fusion
                .segments
                .iter()
                .zip(maps)
                .map(|(sg, l)| l.forward(&self.store, x.slice(s![.., sg.offset..sg.offset + sg.length])))
                .collect(),
            Tokens::Chunked => {
                let d_tok = self.layout.token_width();
                let n = x.ncols();
                (0..n.div_ceil(d_tok))
                    .map(|t| {
                        let mut tok = Array2::zeros((x.nrows(), d_tok));
                        let end = ((t + 1) * d_tok).min(n);
                        tok.slice_mut(s![.., ..end - t * d_tok]).assign(&x.slice(s![.., t * d_tok..end]));
                        tok
                    })
                    .collect()
            }
        }
    }

    fn seq_forward(&self, x: &Array2<f64>) -> SeqCache {
        let Body::Seq {
            tokens,
            norm,
            fwd,
            bwd,
            attn: _,
        } = &self.body
        else {
            unreachable!("sequence forward on a dense head")
        };
        let raw = self.make_tokens(tokens, x);
        let (toks, ln) = match norm {
            Some(n) => raw.iter().map(|t| n.forward(&self.store, t)).unzip(),
            None => (raw.clone(), Vec::new()),
        };
        let refs: Vec<&Array2<f64>> = toks.iter().collect();
        let fwd_out = fwd.as_ref().map(|l| l.forward(&self.store, &refs));
        let bwd_out = bwd.as_ref().map(|l| {
            let rev: Vec<&Array2<f64>> = refs.iter().rev().copied().collect();
            l.forward(&self.store, &rev)
        });
        let t_len = toks.len();
        let seq: Vec<Array2<f64>> = match (&fwd_out, &bwd_out) {
            (None, _) => Vec::new(),
            (Some((hf, _)), None) => hf.clone(),
            (Some((hf, _)), Some((hb, _))) => (0..t_len)
                .map(|t| concatenate![Axis(1), hf[t], hb[t_len - 1 - t]])
                .collect(),
        };
        SeqCache {
            ln,
            toks,
            fwd: fwd_out,
            bwd: bwd_out,
            seq,
            attn: None,
        }
    }

    /// Logits for a batch; `rng` enables training-mode dropout.
    pub(crate) fn forward(&self, x: &Array2<f64>, rng: Option<&mut ChaCha8Rng>) -> (Array2<f64>, Cache) {
        assert_eq!(x.ncols(), self.layout.fusion.dim(), "input width");
        let (rep, body) = match &self.body {
            Body::Dense { norm, fc } => {
                let (input, ln) = match norm {
                    Some(n) => {
                        let (y, c) = n.forward(&self.store, x);
                        (y, Some(c))
                    }
                    None => (x.clone(), None),
                };
                let pre = fc.forward(&self.store, input.view());
                (pre.mapv(|v| v.max(0.0)), BodyCache::Dense { ln, input, pre })
            }
            Body::Seq { attn, fwd, bwd, .. } => {
                let mut c = self.seq_forward(x);
                let t_len = c.toks.len();
                let rep = match attn {
                    Some(a) => {
                        let inputs: Vec<&Array2<f64>> =
                            if fwd.is_some() { c.seq.iter().collect() } else { c.toks.iter().collect() };
                        let (pooled, ac) = a.forward(&self.store, &inputs);
                        c.attn = Some(ac);
                        pooled
                    }
                    None => {
                        let hf = &c.fwd.as_ref().expect("recurrent body").0;
                        match (bwd, &c.bwd) {
                            (Some(_), Some((hb, _))) => concatenate![Axis(1), hf[t_len - 1], hb[t_len - 1]],
                            _ => hf[t_len - 1].clone(),
                        }
                    }
                };
                (rep, BodyCache::Seq(c))
            }
        };
        let (dropped, mask) = match rng {
            Some(r) if self.dropout > 0.0 => {
                let keep = 1.0 / (1.0 - self.dropout);
                let m = Array2::from_shape_fn(rep.raw_dim(), |_| if r.random::<f64>() < self.dropout { 0.0 } else { keep });
                (&rep * &m, Some(m))
            }
            _ => (rep.clone(), None),
        };
        let logits = self.classifier.forward(&self.store, dropped.view());
        (
            logits,
            Cache {
                x: x.clone(),
                body,
                mask,
                rep: dropped,
            },
        )
    }

    /// Accumulates parameter gradients of the loss whose logits-gradient is `dlogits`.
    pub(crate) fn backward(&mut self, cache: &Cache, dlogits: &Array2<f64>) {
        let mut st = std::mem::take(&mut self.store);
        let mut drep = self.classifier.backward(&mut st, cache.rep.view(), dlogits);
        if let Some(m) = &cache.mask {
            drep *= m;
        }
        match (&self.body, &cache.body) {
            (Body::Dense { norm, fc }, BodyCache::Dense { ln, input, pre }) => {
                let dpre = drep * &pre.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let dinput = fc.backward(&mut st, input.view(), &dpre);
                if let (Some(n), Some(c)) = (norm, ln) {
                    n.backward(&mut st, c, &dinput);
                }
            }
            (
                Body::Seq {
                    tokens,
                    norm,
                    fwd,
                    bwd,
                    attn,
                },
                BodyCache::Seq(c),
            ) => {
                let t_len = c.toks.len();
                let batch = drep.nrows();
                let hd = fwd.as_ref().map_or(0, |l| l.hidden);
                // gradient w.r.t. the recurrent outputs (or tokens when attention reads them directly)
                let mut dtoks = vec![Array2::<f64>::zeros(c.toks[0].raw_dim()); t_len];
                let mut dhf = vec![Array2::<f64>::zeros((batch, hd)); if fwd.is_some() { t_len } else { 0 }];
                let mut dhb = vec![Array2::<f64>::zeros((batch, hd)); if bwd.is_some() { t_len } else { 0 }];
                match attn {
                    Some(a) => {
                        let dseq = a.backward(&mut st, c.attn.as_ref().expect("attention cache"), &drep);
                        for (t, d) in dseq.into_iter().enumerate() {
                            match (fwd.is_some(), bwd.is_some()) {
                                (false, _) => dtoks[t] = d,
                                (true, false) => dhf[t] = d,
                                (true, true) => {
                                    dhf[t] = d.slice(s![.., ..hd]).to_owned();
                                    dhb[t_len - 1 - t] = d.slice(s![.., hd..]).to_owned();
                                }
                            }
                        }
                    }
                    None => {
                        if bwd.is_some() {
                            dhf[t_len - 1] = drep.slice(s![.., ..hd]).to_owned();
                            dhb[t_len - 1] = drep.slice(s![.., hd..]).to_owned();
                        } else {
                            dhf[t_len - 1] = drep;
                        }
                    }
                }
                if let (Some(l), Some((_, steps))) = (fwd, &c.fwd) {
                    for (t, d) in l.backward(&mut st, steps, &dhf).into_iter().enumerate() {
                        dtoks[t] += &d;
                    }
                }
                if let (Some(l), Some((_, steps))) = (bwd, &c.bwd) {
                    for (j, d) in l.backward(&mut st, steps, &dhb).into_iter().enumerate() {
                        dtoks[t_len - 1 - j] += &d;
                    }
                }
                let draw: Vec<Array2<f64>> = match norm {
                    Some(n) => dtoks.iter().zip(&c.ln).map(|(d, lc)| n.backward(&mut st, lc, d)).collect(),
                    None => dtoks,
                };
                if let Tokens::PerBackbone(maps) = tokens {
                    for ((sg, l), d) in self.layout.fusion.segments.iter().zip(maps).zip(&draw) {
                        l.backward(&mut st, cache.x.slice(s![.., sg.offset..sg.offset + sg.length]), d);
                    }
                }
            }
            _ => unreachable!("cache does not match the head body"),
        }
        self.store = st;
    }

    /// Mean softmax cross-entropy, its logits gradient and per-row argmax hits.
    pub(crate) fn loss(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>, usize) {
        let batch = logits.nrows();
        let probs = softmax_rows(logits);
        let mut loss = 0.0;
        let mut correct = 0;
        let mut grad = probs.clone();
        for (b, &y) in labels.iter().enumerate() {
            loss -= probs[[b, y]].max(1e-300).ln();
            if argmax(probs.row(b).as_slice().expect("contiguous row")) == y {
                correct += 1;
            }
            grad[[b, y]] -= 1.0;
        }
        (loss / batch as f64, grad / batch as f64, correct)
    }

    /// Loss and flat gradient at the current parameters.
    pub fn loss_and_grad(&mut self, x: &Array2<f64>, labels: &[usize], dropout_seed: Option<u64>) -> (f64, Vec<f64>) {
        let mut rng = dropout_seed.map(|s| crate::seeds::rng_for("dropout", &[s.into()]));
        let (logits, cache) = self.forward(x, rng.as_mut());
        let (loss, dlogits, _) = Self::loss(&logits, labels);
        self.store.zero_grad();
        self.backward(&cache, &dlogits);
        (loss, self.store.flat_grad())
    }

    pub fn loss_at(&self, x: &Array2<f64>, labels: &[usize], dropout_seed: Option<u64>) -> f64 {
        let mut rng = dropout_seed.map(|s| crate::seeds::rng_for("dropout", &[s.into()]));
        let (logits, _) = self.forward(x, rng.as_mut());
        Self::loss(&logits, labels).0
    }

    pub fn params(&self) -> Vec<f64> {
        self.store.flat()
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        self.store.set_flat(flat);
    }

    pub fn logits(&self, x: &Array2<f64>) -> Array2<f64> {
        self.forward(x, None).0
    }

    /// Per-token attention weights for each input row (attention kinds only).
    pub(crate) fn token_weights(&self, x: &Array2<f64>) -> Option<Array2<f64>> {
        match self.forward(x, None).1.body {
            BodyCache::Seq(SeqCache { attn: Some(a), .. }) => Some(Attention::token_weights(&a)),
            _ => None,
        }
    }

    /// Attention weights computed directly from post-projection tokens.
    pub(crate) fn token_weights_from_tokens(&self, tokens: &[Array2<f64>]) -> Option<Array2<f64>> {
        let Body::Seq { norm, fwd, bwd, attn: Some(a), .. } = &self.body else {
            return None;
        };
        let toks: Vec<Array2<f64>> = match norm {
            Some(n) => tokens.iter().map(|t| n.forward(&self.store, t).0).collect(),
            None => tokens.to_vec(),
        };
        let refs: Vec<&Array2<f64>> = toks.iter().collect();
        let seq: Vec<Array2<f64>> = match (fwd, bwd) {
            (None, _) => toks.clone(),
            (Some(f), None) => f.forward(&self.store, &refs).0,
            (Some(f), Some(b)) => {
                let hf = f.forward(&self.store, &refs).0;
                let rev: Vec<&Array2<f64>> = refs.iter().rev().copied().collect();
                let hb = b.forward(&self.store, &rev).0;
                let t_len = toks.len();
                (0..t_len).map(|t| concatenate![Axis(1), hf[t], hb[t_len - 1 - t]]).collect()
            }
        };
        let seq_refs: Vec<&Array2<f64>> = seq.iter().collect();
        let (_, cache) = a.forward(&self.store, &seq_refs);
        Some(Attention::token_weights(&cache))
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Multiply-accumulates of one inference forward pass.
    pub fn inference_macs(&self) -> u64 {
        let d = self.layout.fusion.dim() as u64;
        let params = self.num_params() as u64;
        match &self.body {
            Body::Dense { .. } => params,
            Body::Seq { tokens, fwd, bwd, attn, .. } => {
                let t = self.layout.tokens() as u64;
                let mut macs = match tokens {
                    Tokens::PerBackbone(_) => d * self.layout.token_width() as u64,
                    Tokens::Chunked => 0,
                };
                for l in [fwd, bwd].into_iter().flatten() {
                    let st = &self.store;
                    macs += t * (st.v(l.wx).len() + st.v(l.wh).len()) as u64;
                }
                if let Some(a) = attn {
                    let st = &self.store;
                    let proj = st.v(a.q.w).len() + st.v(a.k.w).len() + st.v(a.v.w).len();
                    macs += t * proj as u64 + 2 * t * t * a.width as u64;
                    if let Some(o) = &a.out {
                        macs += t * st.v(o.w).len() as u64;
                    }
                }
                macs + self.store.v(self.classifier.w).len() as u64
            }
        }
    }
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Adam with bias correction.
pub(crate) struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &Store, lr: f64) -> Self {
        let zeros: Vec<_> = store.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut Store) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, g), (m, v)) in store.values.iter_mut().zip(&store.grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            m.zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            v.zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + eps);
            });
        }
    }
}
