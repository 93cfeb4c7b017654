//! Independent reimplementation of the protocol on plain nested vectors.
//!
//! Nothing here calls into the crate's numerics; only the RNG streams are
//! shared so that mini-batch orders coincide.
#![allow(dead_code)]

use std::collections::BTreeMap;

use fedmate_core::nn::{Dense, Extractor, ModelParams};
use fedmate_core::rng::{child_rng, Stream};
use rand::seq::SliceRandom;

pub type Protos = BTreeMap<usize, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct Lin {
    /// `w[out][in]`
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Lin {
    pub fn from_dense(d: &Dense) -> Self {
        let n_in = d.in_dim();
        let w = (0..d.out_dim())
            .map(|r| d.weights()[r * n_in..(r + 1) * n_in].to_vec())
            .collect();
        Self {
            w,
            b: d.bias().to_vec(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            w: self.w.iter().map(|r| vec![0.0; r.len()]).collect(),
            b: vec![0.0; self.b.len()],
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .zip(&self.b)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// `self += scale * dout xᵀ`, bias `+= scale * dout`.
    pub fn add_outer(&mut self, dout: &[f64], x: &[f64], scale: f64) {
        for (r, d) in dout.iter().enumerate() {
            for (w, v) in self.w[r].iter_mut().zip(x) {
                *w += scale * d * v;
            }
            self.b[r] += scale * d;
        }
    }

    /// `Wᵀ d`
    pub fn back(&self, d: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.w[0].len()];
        for (row, dv) in self.w.iter().zip(d) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * dv;
            }
        }
        out
    }

    pub fn step(&mut self, g: &Lin, lr: f64) {
        for (row, grow) in self.w.iter_mut().zip(&g.w) {
            for (w, d) in row.iter_mut().zip(grow) {
                *w -= lr * d;
            }
        }
        for (b, d) in self.b.iter_mut().zip(&g.b) {
            *b -= lr * d;
        }
    }

    pub fn max_diff(&self, d: &Dense) -> f64 {
        let o = Lin::from_dense(d);
        assert_eq!(o.w.len(), self.w.len(), "row count");
        let mut m: f64 = 0.0;
        for (a, b) in self
            .w
            .iter()
            .flatten()
            .zip(o.w.iter().flatten())
            .chain(self.b.iter().zip(&o.b))
        {
            m = m.max((a - b).abs());
        }
        m
    }

    pub fn count(&self) -> usize {
        self.b.len() * (self.w[0].len() + 1)
    }
}

pub fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn ce(logits: &[f64], y: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = logits.iter().map(|x| (x - m).exp()).sum();
    m + s.ln() - logits[y]
}

/// `d ce / d logits`
pub fn ce_grad(logits: &[f64], y: usize) -> Vec<f64> {
    let mut p = softmax(logits);
    p[y] -= 1.0;
    p
}

/// `ln(1 + e^x)`
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn bce(logit: f64, target: f64) -> f64 {
    if target == 1.0 {
        softplus(-logit)
    } else {
        softplus(logit)
    }
}

pub fn kappa(t: usize, t_max: usize) -> f64 {
    if t_max == 0 {
        0.0
    } else {
        (1.0 - t as f64 / t_max as f64).max(0.0)
    }
}

/// Pre-activations and activations of each extractor layer.
pub fn ext_trace(ext: &[Lin], x: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut out = Vec::new();
    let mut h = x.to_vec();
    for l in ext {
        let pre = l.apply(&h);
        h = relu(&pre);
        out.push((pre, h.clone()));
    }
    out
}

pub fn features(ext: &[Lin], x: &[f64]) -> Vec<f64> {
    ext_trace(ext, x).pop().expect("non-empty extractor").1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Disc {
    pub hidden: Lin,
    pub output: Lin,
}

impl Disc {
    pub fn from_core(d: &fedmate_core::losses::Discriminator) -> Self {
        Self {
            hidden: Lin::from_dense(d.hidden()),
            output: Lin::from_dense(d.output()),
        }
    }

    pub fn pre(&self, o: &[f64]) -> Vec<f64> {
        self.hidden.apply(o)
    }

    pub fn logit(&self, o: &[f64]) -> f64 {
        self.output.apply(&relu(&self.hidden.apply(o)))[0]
    }

    /// Gradient of the logit w.r.t. the input, scaled by `dz`, plus the
    /// parameter gradients when `acc` is given.
    fn backward(&self, o: &[f64], dz: f64, acc: Option<(&mut Lin, &mut Lin)>) -> Vec<f64> {
        let pre = self.hidden.apply(o);
        let a = relu(&pre);
        let dh: Vec<f64> = self.output.w[0]
            .iter()
            .zip(&pre)
            .map(|(w, p)| if *p > 0.0 { w * dz } else { 0.0 })
            .collect();
        if let Some((gh, go)) = acc {
            go.add_outer(&[dz], &a, 1.0);
            gh.add_outer(&dh, o, 1.0);
        }
        self.hidden.back(&dh)
    }

    /// Summed BCE over `(input, target)` pairs and its parameter gradients.
    pub fn loss_grad(&self, pairs: &[(Vec<f64>, f64)]) -> (f64, Lin, Lin) {
        let mut gh = self.hidden.zeros_like();
        let mut go = self.output.zeros_like();
        let mut loss = 0.0;
        for (o, t) in pairs {
            let z = self.logit(o);
            loss += bce(z, *t);
            self.backward(o, sigmoid(z) - t, Some((&mut gh, &mut go)));
        }
        (loss, gh, go)
    }

    pub fn step(&mut self, pairs: &[(Vec<f64>, f64)], lr: f64) {
        let (_, gh, go) = self.loss_grad(pairs);
        self.hidden.step(&gh, lr);
        self.output.step(&go, lr);
    }

    /// `d BCE(D(o), 1) / d o`
    pub fn generator_input_grad(&self, o: &[f64]) -> (f64, Vec<f64>) {
        let z = self.logit(o);
        (bce(z, 1.0), self.backward(o, sigmoid(z) - 1.0, None))
    }
}

pub fn disc_pr_pairs(cls: &Lin, global: &Protos, local: &Protos) -> Vec<(Vec<f64>, f64)> {
    let mut pairs = Vec::new();
    for (k, pl) in local {
        if let Some(pg) = global.get(k) {
            pairs.push((cls.apply(pg), 1.0));
            pairs.push((cls.apply(pl), 0.0));
        }
    }
    pairs
}

pub fn disc_cl_pairs(cls: &Lin, global_cls: &Lin, global: &Protos) -> Vec<(Vec<f64>, f64)> {
    let mut pairs = Vec::new();
    for p in global.values() {
        pairs.push((global_cls.apply(p), 1.0));
        pairs.push((cls.apply(p), 0.0));
    }
    pairs
}

/// Generator loss and its classifier gradient.
pub fn generator(cls: &Lin, d_pr: &Disc, d_cl: &Disc, local: &Protos, global: &Protos) -> (f64, Lin) {
    let mut g = cls.zeros_like();
    let mut loss = 0.0;
    let terms = local
        .values()
        .map(|p| (d_pr, p))
        .chain(global.values().map(|p| (d_cl, p)));
    for (d, p) in terms {
        let (l, dout) = d.generator_input_grad(&cls.apply(p));
        loss += l;
        g.add_outer(&dout, p, 1.0);
    }
    (loss, g)
}

/// Prototype cross-entropy over local classes plus `kappa` times the
/// generator loss.
pub fn fusion(cls: &Lin, d_pr: &Disc, d_cl: &Disc, local: &Protos, global: &Protos, kap: f64) -> (f64, Lin) {
    let mut g = cls.zeros_like();
    let mut loss = 0.0;
    for (k, p) in local {
        let o = cls.apply(p);
        loss += ce(&o, *k);
        g.add_outer(&ce_grad(&o, *k), p, 1.0);
    }
    if kap > 0.0 {
        let (l, ga) = generator(cls, d_pr, d_cl, local, global);
        loss += kap * l;
        for (row, grow) in g.w.iter_mut().zip(&ga.w) {
            for (a, b) in row.iter_mut().zip(grow) {
                *a += kap * b;
            }
        }
        for (a, b) in g.b.iter_mut().zip(&ga.b) {
            *a += kap * b;
        }
    }
    (loss, g)
}

/// Mean squared distance of features to their class prototype over samples
/// whose class has one, with per-sample feature gradients.
pub fn center(feats: &[(Vec<f64>, usize)], protos: &Protos) -> (f64, Vec<Vec<f64>>) {
    let n = feats.iter().filter(|(_, y)| protos.contains_key(y)).count();
    let mut grads = vec![vec![0.0; feats.first().map_or(0, |f| f.0.len())]; feats.len()];
    if n == 0 {
        return (0.0, grads);
    }
    let mut loss = 0.0;
    for ((h, y), g) in feats.iter().zip(&mut grads) {
        if let Some(p) = protos.get(y) {
            for ((gi, hi), pi) in g.iter_mut().zip(h).zip(p) {
                loss += (hi - pi).powi(2);
                *gi = 2.0 * (hi - pi) / n as f64;
            }
        }
    }
    (loss / n as f64, grads)
}

/// Backpropagates per-sample feature gradients through the extractor.
pub fn ext_backward(ext: &[Lin], x: &[f64], dfeat: &[f64], acc: &mut [Lin]) {
    let tr = ext_trace(ext, x);
    let mut d = dfeat.to_vec();
    for li in (0..ext.len()).rev() {
        let dpre: Vec<f64> = d
            .iter()
            .zip(&tr[li].0)
            .map(|(g, p)| if *p > 0.0 { *g } else { 0.0 })
            .collect();
        let input = if li == 0 { x.to_vec() } else { tr[li - 1].1.clone() };
        acc[li].add_outer(&dpre, &input, 1.0);
        d = ext[li].back(&dpre);
    }
}

pub fn class_means(ext: &[Lin], data: &[(Vec<f64>, usize)]) -> Protos {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, y) in data {
        let h = features(ext, x);
        let e = sums.entry(*y).or_insert_with(|| (vec![0.0; h.len()], 0));
        for (a, b) in e.0.iter_mut().zip(&h) {
            *a += b;
        }
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect()
}

pub fn ext_from_core(e: &Extractor) -> Vec<Lin> {
    e.layers().iter().map(Lin::from_dense).collect()
}

pub fn ext_max_diff(a: &[Lin], b: &Extractor) -> f64 {
    assert_eq!(a.len(), b.layers().len());
    a.iter().zip(b.layers()).map(|(l, d)| l.max_diff(d)).fold(0.0, f64::max)
}

pub fn protos_max_diff(a: &Protos, b: &fedmate_core::PrototypeSet) -> f64 {
    let kb: Vec<usize> = b.classes().collect();
    let ka: Vec<usize> = a.keys().copied().collect();
    assert_eq!(ka, kb, "prototype classes differ");
    a.iter()
        .flat_map(|(k, v)| v.iter().zip(b.get(*k).unwrap()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy)]
pub struct Hyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lambda_c: f64,
    pub lambda_e: f64,
    pub max_round: usize,
    pub finetune_lr: f64,
    pub finetune_steps: usize,
    pub seed: u64,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct Client {
    pub id: usize,
    pub ext: Vec<Lin>,
    pub cls: Lin,
    pub d_pr: Disc,
    pub d_cl: Disc,
    pub data: Vec<(Vec<f64>, usize)>,
    pub num_classes: usize,
}

#[derive(Debug, Clone)]
pub struct Message {
    pub round: usize,
    pub cls: Lin,
    pub protos: Option<Protos>,
    pub ext: Option<Vec<Lin>>,
}

#[derive(Debug, Clone)]
pub struct Upload {
    pub id: usize,
    pub cls: Lin,
    pub protos: Protos,
    pub counts: Vec<usize>,
    pub total: usize,
    pub ext: Option<Vec<Lin>>,
}

impl Client {
    pub fn round(&mut self, m: &Message, h: &Hyper) -> Upload {
        if let Some(e) = &m.ext {
            self.ext = e.clone();
        }
        let local = class_means(&self.ext, &self.data);
        let mut rng = child_rng(h.seed, Stream::ClientRound, self.id as u64, m.round as u64);
        let n = self.data.len();
        for _ in 0..h.epochs {
            let feats: Vec<Vec<f64>> = self.data.iter().map(|(x, _)| features(&self.ext, x)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            for chunk in order.chunks(h.batch_size) {
                if let Some(gp) = &m.protos {
                    self.d_pr.step(&disc_pr_pairs(&self.cls, gp, &local), h.lr);
                    self.d_cl.step(&disc_cl_pairs(&self.cls, &m.cls, gp), h.lr);
                }
                let mut g = self.cls.zeros_like();
                for &i in chunk {
                    let o = self.cls.apply(&feats[i]);
                    g.add_outer(&ce_grad(&o, self.data[i].1), &feats[i], 1.0 / chunk.len() as f64);
                }
                if let (Some(gp), true) = (&m.protos, h.lambda_c != 0.0) {
                    let kap = kappa(m.round, h.max_round);
                    let (_, gf) = fusion(&self.cls, &self.d_pr, &self.d_cl, &local, gp, kap);
                    for (row, grow) in g.w.iter_mut().zip(&gf.w) {
                        for (a, b) in row.iter_mut().zip(grow) {
                            *a += h.lambda_c * b;
                        }
                    }
                    for (a, b) in g.b.iter_mut().zip(&gf.b) {
                        *a += h.lambda_c * b;
                    }
                }
                self.cls.step(&g, h.lr);
            }
            if let Some(gp) = &m.protos {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut rng);
                for chunk in order.chunks(h.batch_size) {
                    let fs: Vec<(Vec<f64>, usize)> = chunk
                        .iter()
                        .map(|&i| (features(&self.ext, &self.data[i].0), self.data[i].1))
                        .collect();
                    let (_, cg) = center(&fs, gp);
                    let mut acc: Vec<Lin> = self.ext.iter().map(Lin::zeros_like).collect();
                    for (j, &i) in chunk.iter().enumerate() {
                        let o = self.cls.apply(&fs[j].0);
                        let mut df = self.cls.back(&ce_grad(&o, fs[j].1));
                        for (d, c) in df.iter_mut().zip(&cg[j]) {
                            *d = *d / chunk.len() as f64 + h.lambda_e * c;
                        }
                        ext_backward(&self.ext, &self.data[i].0, &df, &mut acc);
                    }
                    for (l, g) in self.ext.iter_mut().zip(&acc) {
                        l.step(g, h.lr);
                    }
                }
            }
        }
        let mut counts = vec![0; self.num_classes];
        for (_, y) in &self.data {
            counts[*y] += 1;
        }
        Upload {
            id: self.id,
            cls: self.cls.clone(),
            protos: class_means(&self.ext, &self.data),
            counts,
            total: n,
            ext: (!(m.round + 1).is_multiple_of(h.stride)).then(|| self.ext.clone()),
        }
    }
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.into_iter().map(|x| x / s).collect()
    } else {
        vec![1.0 / v.len() as f64; v.len()]
    }
}

pub fn js(p: &[f64], q: &[f64]) -> f64 {
    let mut d = 0.0;
    for (a, b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if *a > 0.0 {
            d += 0.5 * a * (a / m).ln();
        }
        if *b > 0.0 {
            d += 0.5 * b * (b / m).ln();
        }
    }
    d
}

/// Three views and their fused weights for one class.
pub struct ClassWeights {
    pub alpha: Vec<f64>,
    pub centroid: Vec<f64>,
    pub beta: Vec<f64>,
    pub views: [f64; 3],
    pub combined: Vec<f64>,
}

pub fn class_weights(protos: &[&Vec<f64>], counts: &[usize], class: usize, reference: Option<&Lin>) -> ClassWeights {
    let total: usize = counts.iter().sum();
    let alpha: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    let dim = protos[0].len();
    let anchor: Vec<f64> = (0..dim)
        .map(|j| protos.iter().map(|p| p[j]).sum::<f64>() / protos.len() as f64)
        .collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let centroid = normalized(
        protos
            .iter()
            .map(|p| {
                let (a, b) = (norm(p), norm(&anchor));
                let cos = if a == 0.0 || b == 0.0 {
                    0.0
                } else {
                    (p.iter().zip(&anchor).map(|(x, y)| x * y).sum::<f64>() / (a * b)).clamp(-1.0, 1.0)
                };
                (1.0 + cos) / 2.0
            })
            .collect(),
    );
    let beta = match reference {
        Some(r) => normalized(protos.iter().map(|p| softmax(&r.apply(p))[class]).collect()),
        None => alpha.clone(),
    };
    let views_list = [&alpha, &centroid, &beta];
    let scores: Vec<f64> = (0..3)
        .map(|a| {
            -(0..3)
                .filter(|&b| b != a)
                .map(|b| js(views_list[a], views_list[b]))
                .sum::<f64>()
        })
        .collect();
    let w = softmax(&scores);
    let views = [w[0], w[1], w[2]];
    let combined = (0..protos.len())
        .map(|i| views[0] * alpha[i] + views[1] * centroid[i] + views[2] * beta[i])
        .collect();
    ClassWeights {
        alpha,
        centroid,
        beta,
        views,
        combined,
    }
}

/// Prototype fusion over clients (ordered by id); classes nobody holds are
/// absent.
pub fn fuse_prototypes(ups: &[Upload], num_classes: usize, reference: Option<&Lin>) -> Protos {
    let mut out = Protos::new();
    for k in 0..num_classes {
        let holders: Vec<&Upload> = ups.iter().filter(|u| u.protos.contains_key(&k)).collect();
        if holders.is_empty() {
            continue;
        }
        let ps: Vec<&Vec<f64>> = holders.iter().map(|u| &u.protos[&k]).collect();
        let counts: Vec<usize> = holders.iter().map(|u| u.counts[k]).collect();
        let cw = class_weights(&ps, &counts, k, reference);
        let dim = ps[0].len();
        let mut p = vec![0.0; dim];
        for (w, v) in cw.combined.iter().zip(&ps) {
            for (a, b) in p.iter_mut().zip(v.iter()) {
                *a += w * b;
            }
        }
        out.insert(k, p);
    }
    out
}

#[derive(Debug, Clone)]
pub struct Server {
    pub ext: Vec<Lin>,
    pub cls: Lin,
    pub protos: Option<Protos>,
    pub round: usize,
    pub fresh: bool,
}

impl Server {
    pub fn new(model: &ModelParams) -> Self {
        Self {
            ext: ext_from_core(&model.extractor),
            cls: Lin::from_dense(model.classifier.dense()),
            protos: None,
            round: 0,
            fresh: false,
        }
    }

    pub fn message(&self) -> Message {
        Message {
            round: self.round,
            cls: self.cls.clone(),
            protos: self.protos.clone(),
            ext: (self.round == 0 || self.fresh).then(|| self.ext.clone()),
        }
    }

    pub fn aggregate(&mut self, ups: &[Upload], h: &Hyper) {
        let num_classes = self.cls.b.len();
        let reference = (self.round > 0).then(|| self.cls.clone());
        let mut protos = fuse_prototypes(ups, num_classes, reference.as_ref());
        if let Some(old) = &self.protos {
            for (k, v) in old {
                protos.entry(*k).or_insert_with(|| v.clone());
            }
        }
        let mut cls = self.cls.clone();
        for k in 0..num_classes {
            let holders: Vec<&Upload> = ups.iter().filter(|u| u.counts[k] > 0).collect();
            if holders.is_empty() {
                continue;
            }
            let total: usize = holders.iter().map(|u| u.counts[k]).sum();
            let mut row = vec![0.0; cls.w[k].len()];
            let mut b = 0.0;
            for u in &holders {
                let a = u.counts[k] as f64 / total as f64;
                for (r, w) in row.iter_mut().zip(&u.cls.w[k]) {
                    *r += a * w;
                }
                b += a * u.cls.b[k];
            }
            cls.w[k] = row;
            cls.b[k] = b;
        }
        for _ in 0..h.finetune_steps {
            let mut g = cls.zeros_like();
            let n = protos.len() as f64;
            for (k, p) in &protos {
                g.add_outer(&ce_grad(&cls.apply(p), *k), p, 1.0 / n);
            }
            cls.step(&g, h.finetune_lr);
        }
        let carriers: Vec<&Upload> = ups.iter().filter(|u| u.ext.is_some()).collect();
        self.fresh = !carriers.is_empty();
        if self.fresh {
            let total: usize = carriers.iter().map(|u| u.total).sum();
            let mut acc: Vec<Lin> = self.ext.iter().map(Lin::zeros_like).collect();
            for u in &carriers {
                let a = u.total as f64 / total as f64;
                for (al, ul) in acc.iter_mut().zip(u.ext.as_ref().unwrap()) {
                    for (ar, ur) in al.w.iter_mut().zip(&ul.w) {
                        for (x, y) in ar.iter_mut().zip(ur) {
                            *x += a * y;
                        }
                    }
                    for (x, y) in al.b.iter_mut().zip(&ul.b) {
                        *x += a * y;
                    }
                }
            }
            self.ext = acc;
        }
        self.cls = cls;
        self.protos = Some(protos);
        self.round += 1;
    }
}
