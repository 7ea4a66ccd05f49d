//! Evaluation: classifier networks, inception score, Fréchet distance,
//! Pearson correlation of pairwise distances, nearest-centroid labelling,
//! silhouette value and cluster coverage.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iterator, SourceVec};
use crate::error::{shape_err, Error, Result};
use crate::gan::translate;
use crate::metric::{l2, pairwise_distances, rows_of, trunk_infer, wave_tensor, AudioMetric};
use crate::nets::{build_trunk, trunk_forward, Ctx, GeneratorSpec, TrunkHead, TrunkSpec};
use crate::tensor::graph::softmax_rows;
use crate::tensor::{adam_step, Graph, NetParams, OptimizerConfig, Tensor};

/// Diagonal loading added to both covariances before the square root.
pub const FID_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelKind {
    Pitch,
    Family,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 8,
            seed: 0,
            optimizer: OptimizerConfig {
                lr0: 1e-3,
                beta1: 0.9,
                ..Default::default()
            },
        }
    }
}

/// Softmax classifier on the down-sampling trunk.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub net: NetParams<f32>,
    pub spec: TrunkSpec,
    pub kind: LabelKind,
    pub held_out_accuracy: f64,
}

impl ClassifierParams {
    pub fn n_classes(&self) -> usize {
        self.spec.out_dim
    }

    /// Trunk features before the softmax head, `[n, 16c]`.
    pub fn penultimate_features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        Ok(trunk_infer(&self.net, &self.spec, x)?.0)
    }

    /// Class posteriors, `[n, K]`.
    pub fn class_probs(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (_, logits) = trunk_infer(&self.net, &self.spec, x)?;
        Tensor::new(logits.shape().to_vec(), softmax_rows(logits.data(), self.n_classes()))
    }

    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
        let p = self.class_probs(x)?;
        let hits = rows_of(&p)
            .iter()
            .zip(labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
        Ok(hits as f64 / labels.len().max(1) as f64)
    }
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Trains a trunk classifier by cross-entropy on `(x, labels)` and reports
/// accuracy on the held-out pair.
pub fn train_classifier(
    x: &Tensor<f32>,
    labels: &[usize],
    held_out: (&Tensor<f32>, &[usize]),
    kind: LabelKind,
    spec: &TrunkSpec,
    cfg: &ClassifierConfig,
) -> Result<ClassifierParams> {
    cfg.optimizer.validate()?;
    if spec.head != TrunkHead::Logits {
        return Err(Error::InvalidArgument("classifier trunk needs a logits head".into()));
    }
    if labels.len() != x.rows() || held_out.1.len() != held_out.0.rows() {
        return Err(shape_err("train_classifier", "one label per clip"));
    }
    if let Some(&y) = labels.iter().chain(held_out.1).find(|&&y| y >= spec.out_dim) {
        return Err(Error::InvalidArgument(format!("label {y} >= {}", spec.out_dim)));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&y| Some(y) == first) {
        return Err(Error::Degenerate("classifier data has a single class".into()));
    }
    let mut net = build_trunk::<f32>(spec, cfg.seed)?;
    let len = x.row_len();
    for epoch in 0..cfg.epochs as u64 {
        for idx in batch_iterator(x.rows(), cfg.batch_size, cfg.seed, epoch)? {
            let data = idx.iter().flat_map(|&i| x.row(i).iter().copied()).collect();
            let batch = Tensor::new(vec![idx.len(), len, 1], data)?;
            let ys: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xv = g.constant(batch);
            let mut ctx = Ctx::train(&mut g);
            let (_, logits) = trunk_forward(&mut ctx, &mut net, spec, xv)?;
            let bindings = std::mem::take(&mut ctx.bindings);
            let loss = g.softmax_cross_entropy(logits, &ys)?;
            let grads = g.backward(loss)?;
            net.accumulate(&grads, &bindings)?;
            adam_step(&mut net, &cfg.optimizer, epoch);
        }
    }
    let mut cls = ClassifierParams {
        net,
        spec: spec.clone(),
        kind,
        held_out_accuracy: 0.0,
    };
    cls.held_out_accuracy = cls.accuracy(held_out.0, held_out.1)?;
    Ok(cls)
}

/// `exp(mean KL(p(y|x) || p(y)))` per split, averaged over splits.
pub fn inception_score(probs: &[Vec<f64>], n_splits: usize) -> Result<f64> {
    if n_splits == 0 || probs.len() < n_splits {
        return Err(Error::InvalidArgument(format!("{} rows for {n_splits} splits", probs.len())));
    }
    let k = probs[0].len();
    for row in probs {
        let s: f64 = row.iter().sum();
        if row.len() != k || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (s - 1.0).abs() > 1e-4 {
            return Err(Error::InvalidArgument("rows must be probability vectors".into()));
        }
    }
    let n = probs.len();
    let mut scores = Vec::with_capacity(n_splits);
    for s in 0..n_splits {
        let part = &probs[s * n / n_splits..(s + 1) * n / n_splits];
        let mut marginal = vec![0.0; k];
        for row in part {
            for (m, &p) in marginal.iter_mut().zip(row) {
                *m += p / part.len() as f64;
            }
        }
        let kl: f64 = part
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&marginal)
                    .filter(|(&p, _)| p > 0.0)
                    .map(|(&p, &m)| p * (p.ln() - m.ln()))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / part.len() as f64;
        scores.push(kl.exp());
    }
    Ok(scores.iter().sum::<f64>() / n_splits as f64)
}

/// Split count rule: ten splits from 500 samples on, otherwise one.
pub fn is_splits(n: usize) -> usize {
    if n >= 500 {
        10
    } else {
        1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMoments {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianMoments {
    /// Mean and population covariance of the rows.
    pub fn fit<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Degenerate("no samples for moments".into()));
        }
        let d = rows[0].as_ref().len();
        let x = DMatrix::from_fn(n, d, |i, j| f64::from(rows[i].as_ref()[j]));
        let mean = DVector::from_fn(d, |j, _| x.column(j).mean());
        let mut c = x;
        for j in 0..d {
            let m = mean[j];
            c.column_mut(j).iter_mut().for_each(|v| *v -= m);
        }
        let cov = (c.transpose() * &c) / n as f64;
        Ok(Self { mean, cov })
    }
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + Tr(Ca + Cb - 2 (Ca Cb)^(1/2))`, with the trace of the
/// product root taken as that of `(Ca^(1/2) Cb Ca^(1/2))^(1/2)`.
pub fn fid(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    let d = a.mean.len();
    if b.mean.len() != d || a.cov.shape() != (d, d) || b.cov.shape() != (d, d) {
        return Err(shape_err("fid", "moment dimensions differ"));
    }
    let eye = DMatrix::<f64>::identity(d, d) * FID_EPS;
    let ca = &a.cov + &eye;
    let cb = &b.cov + &eye;
    let ra = sym_sqrt(&ca);
    let inner = &ra * &cb * &ra;
    let cross = sym_sqrt(&inner).trace();
    let dm = (&a.mean - &b.mean).norm_squared();
    Ok((dm + ca.trace() + cb.trace() - 2.0 * cross).max(0.0))
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("distance vector has zero variance".into()));
    }
    Ok(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Pearson correlation between the pairwise distances of two paired sets.
pub fn pearson_pc<R: AsRef<[f32]>, S: AsRef<[f32]>>(src: &[R], feat: &[S]) -> Result<f64> {
    if src.len() != feat.len() || src.len() < 3 {
        return Err(shape_err("pearson_pc", format!("{} vs {} samples (need >= 3)", src.len(), feat.len())));
    }
    pearson(&pairwise_distances(src), &pairwise_distances(feat))
}

/// Pearson correlation of two precomputed distance lists.
pub fn pearson_of_distances(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(shape_err("pearson", "distance lists differ in length"));
    }
    pearson(x, y)
}

/// Mean feature of each label in `0..k`.
pub fn centroids<R: AsRef<[f32]>>(rows: &[R], labels: &[usize], k: usize) -> Result<Vec<Vec<f32>>> {
    let d = rows.first().map_or(0, |r| r.as_ref().len());
    let mut sums = vec![vec![0.0f64; d]; k];
    let mut counts = vec![0usize; k];
    for (r, &y) in rows.iter().zip(labels) {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} >= {k}")));
        }
        counts[y] += 1;
        for (s, &v) in sums[y].iter_mut().zip(r.as_ref()) {
            *s += f64::from(v);
        }
    }
    if let Some(y) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Degenerate(format!("no real clip for family {y}")));
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| s.into_iter().map(|v| (v / c as f64) as f32).collect())
        .collect())
}

/// Family of the nearest centroid, ties to the lowest id.
pub fn assign_to_centroids<R: AsRef<[f32]>>(rows: &[R], cents: &[Vec<f32>]) -> Vec<usize> {
    rows.iter()
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for (k, c) in cents.iter().enumerate() {
                let d = l2(r.as_ref(), c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            best.0
        })
        .collect()
}

/// How a translated clip picks its real family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssignRule {
    /// Nearest family centroid.
    #[default]
    Centroid,
    /// Family of the nearest single real clip.
    NearestNeighbor,
}

/// Labels translated features by the nearest real family centroid.
pub fn assign_labels<R: AsRef<[f32]>, S: AsRef<[f32]>>(
    translated: &[R],
    real: &[S],
    real_labels: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    assign_labels_with(AssignRule::Centroid, translated, real, real_labels, k)
}

/// Labels translated features under `rule`; ties go to the lowest id (or
/// the earliest real clip).
pub fn assign_labels_with<R: AsRef<[f32]>, S: AsRef<[f32]>>(
    rule: AssignRule,
    translated: &[R],
    real: &[S],
    real_labels: &[usize],
    k: usize,
) -> Result<Vec<usize>> {
    let cents = centroids(real, real_labels, k)?;
    Ok(match rule {
        AssignRule::Centroid => assign_to_centroids(translated, &cents),
        AssignRule::NearestNeighbor => {
            let nearest = assign_to_centroids(translated, &real.iter().map(|r| r.as_ref().to_vec()).collect::<Vec<_>>());
            nearest.into_iter().map(|i| real_labels[i]).collect()
        }
    })
}

/// Mean silhouette `(b - a) / max(a, b)`; members of singleton clusters
/// score zero.
pub fn silhouette_value<R: AsRef<[f32]>>(rows: &[R], labels: &[usize]) -> Result<f64> {
    if rows.len() != labels.len() {
        return Err(shape_err("silhouette", "one label per sample"));
    }
    let k = labels.iter().max().map_or(0, |&m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&y| sizes[y] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::Degenerate("silhouette needs at least two clusters".into()));
    }
    let n = rows.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += l2(&rows[i], &rows[j]);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / n as f64)
}

/// Fraction of the `k` families that receive at least `ceil(n / 100)`
/// assignments.
pub fn cluster_coverage(labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() || k == 0 {
        return 0.0;
    }
    let need = labels.len().div_ceil(100);
    let mut counts = vec![0usize; k];
    for &y in labels.iter().filter(|&&y| y < k) {
        counts[y] += 1;
    }
    counts.iter().filter(|&&c| c >= need).count() as f64 / k as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid_pitch: f64,
    pub fid_family: f64,
    pub is_pitch: f64,
    pub is_family: f64,
    pub pearson_pc: f64,
    pub silhouette_sv: f64,
    pub cluster_coverage: f64,
    pub n_translated: usize,
    pub n_real: usize,
    pub config_hash: String,
}

/// Everything `evaluate` consumes.
pub struct EvalInputs<'a> {
    pub g: &'a NetParams<f32>,
    pub g_spec: &'a GeneratorSpec,
    /// Held-out source embeddings to translate.
    pub src: &'a [SourceVec],
    /// Real test clips `[n, L, 1]` with their family and pitch classes.
    pub real: &'a Tensor<f32>,
    pub real_family: &'a [usize],
    pub n_families: usize,
    pub metric: &'a mut AudioMetric<f32>,
    pub pitch_classifier: &'a ClassifierParams,
    pub family_classifier: &'a ClassifierParams,
    pub assign_rule: AssignRule,
    pub seed: u64,
    pub config_hash: String,
}

/// Report plus the per-sample data behind it.
#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: EvalReport,
    pub pitch: Vec<usize>,
    pub translated_phi: Tensor<f32>,
    pub assigned: Vec<usize>,
}

fn prob_rows(t: &Tensor<f32>) -> Vec<Vec<f64>> {
    rows_of(t).iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect()
}

/// Translates the held-out sources with uniformly drawn pitches and scores
/// them against the real test clips.
pub fn evaluate(inp: EvalInputs<'_>) -> Result<EvalOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(inp.seed);
    let pitch: Vec<usize> = inp.src.iter().map(|_| rng.random_range(0..inp.g_spec.n_pitch_classes)).collect();
    let waves = translate(inp.g, inp.g_spec, inp.src, &pitch)?;
    let fake = wave_tensor::<f32>(waves.iter().map(|w| w.samples()))?;

    let fake_phi = inp.metric.features(&fake)?;
    let real_phi = inp.metric.features(inp.real)?;
    let assigned = assign_labels_with(inp.assign_rule, &rows_of(&fake_phi), &rows_of(&real_phi), inp.real_family, inp.n_families)?;
    let src_rows: Vec<&[f32]> = inp.src.iter().map(|s| s.values.as_slice()).collect();
    let pc = pearson_pc(&src_rows, &rows_of(&fake_phi))?;
    let sv = silhouette_value(&src_rows, &assigned).unwrap_or(0.0);

    let mut fids = [0.0; 2];
    let mut iss = [0.0; 2];
    for (i, cls) in [inp.pitch_classifier, inp.family_classifier].into_iter().enumerate() {
        let ff = cls.penultimate_features(&fake)?;
        let rf = cls.penultimate_features(inp.real)?;
        fids[i] = fid(&GaussianMoments::fit(&rows_of(&rf))?, &GaussianMoments::fit(&rows_of(&ff))?)?;
        let probs = prob_rows(&cls.class_probs(&fake)?);
        iss[i] = inception_score(&probs, is_splits(probs.len()))?;
    }
    Ok(EvalOutput {
        report: EvalReport {
            fid_pitch: fids[0],
            fid_family: fids[1],
            is_pitch: iss[0],
            is_family: iss[1],
            pearson_pc: pc,
            silhouette_sv: sv,
            cluster_coverage: cluster_coverage(&assigned, inp.n_families),
            n_translated: waves.len(),
            n_real: inp.real.rows(),
            config_hash: inp.config_hash,
        },
        pitch,
        translated_phi: fake_phi,
        assigned,
    })
}
