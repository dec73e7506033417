//! Synthetic correlated-label datasets.
//!
//! Labels come from a pairwise binary Markov random field whose biases and
//! couplings are fitted, by exact coordinate-wise moment matching, to the
//! requested positive ratios and pairwise correlations. Each sample is drawn
//! with an independent Gibbs chain. Every active label then paints its own
//! glyph into one face region, so a local patch only sees the labels whose
//! regions it covers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{crop_patches, CropSpec, Dataset, PatchGeometry, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest number of free label variables handled by exact enumeration.
pub const MAX_FREE_LABELS: usize = 16;
pub const MIN_BURN_IN: usize = 100;

const RATIO_TOL: f64 = 1e-3;
const CORR_TOL: f64 = 0.02;
const MAX_SWEEPS: usize = 2000;
const SUBJECT_STREAM_BASE: u64 = 1 << 62;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_labels: usize,
    /// Symmetric N×N matrix with unit diagonal.
    pub correlations: Vec<Vec<f64>>,
    pub positive_ratios: Vec<f64>,
    /// Standard deviation of additive pixel noise.
    pub glyph_noise: f64,
    /// Scale in `[0, 1]` of the per-subject background, gain and position shifts.
    pub appearance_jitter: f64,
    /// Probability in `[0, 1)` that an active label leaves no visible glyph.
    pub glyph_dropout: f64,
    pub subjects: usize,
    pub samples_per_subject: usize,
    pub crop: CropSpec,
    /// Append the whole face as the last stream.
    pub include_face: bool,
    pub burn_in: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Independent labels with a common positive ratio, default geometry.
    pub fn independent(num_labels: usize, ratio: f64) -> Self {
        let correlations = (0..num_labels)
            .map(|i| (0..num_labels).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            num_labels,
            correlations,
            positive_ratios: vec![ratio; num_labels],
            glyph_noise: 0.1,
            appearance_jitter: 1.0,
            glyph_dropout: 0.0,
            subjects: 6,
            samples_per_subject: 50,
            crop: CropSpec::default(),
            include_face: true,
            burn_in: MIN_BURN_IN,
            seed: 0,
        }
    }

    pub fn set_correlation(&mut self, i: usize, j: usize, rho: f64) {
        self.correlations[i][j] = rho;
        self.correlations[j][i] = rho;
    }

    pub fn num_samples(&self) -> usize {
        self.subjects * self.samples_per_subject
    }

    pub fn geometry(&self) -> Vec<PatchGeometry> {
        let mut g = vec![PatchGeometry::square(self.crop.patch_size, 3); self.crop.anchors.len()];
        if self.include_face {
            g.push(PatchGeometry::square(self.crop.face_size, 3));
        }
        g
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_labels;
        let bad = |m: String| Err(Error::Config(m));
        if n == 0 {
            return bad("num_labels must be positive".into());
        }
        if self.positive_ratios.len() != n {
            return bad(format!("{} positive ratios for {n} labels", self.positive_ratios.len()));
        }
        if let Some(r) = self.positive_ratios.iter().find(|r| !(**r > 0.0 && **r < 1.0)) {
            return bad(format!("positive ratio {r} must lie strictly inside (0, 1)"));
        }
        if self.correlations.len() != n || self.correlations.iter().any(|r| r.len() != n) {
            return bad(format!("correlation matrix must be {n}x{n}"));
        }
        for i in 0..n {
            if self.correlations[i][i] != 1.0 {
                return bad(format!("correlation diagonal entry {i} is not 1"));
            }
            for j in 0..n {
                let c = self.correlations[i][j];
                if !(-1.0..=1.0).contains(&c) {
                    return bad(format!("correlation ({i},{j}) = {c} outside [-1, 1]"));
                }
                if (c - self.correlations[j][i]).abs() > 1e-12 {
                    return bad(format!("correlation matrix not symmetric at ({i},{j})"));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.appearance_jitter) {
            return bad(format!("appearance_jitter {} must lie in [0, 1]", self.appearance_jitter));
        }
        if !(0.0..1.0).contains(&self.glyph_dropout) {
            return bad(format!("glyph_dropout {} must lie in [0, 1)", self.glyph_dropout));
        }
        if !(self.glyph_noise >= 0.0 && self.glyph_noise.is_finite()) {
            return bad("glyph_noise must be a finite non-negative number".into());
        }
        if self.burn_in < MIN_BURN_IN {
            return bad(format!("burn_in must be at least {MIN_BURN_IN} sweeps"));
        }
        if self.crop.anchors.is_empty() && !self.include_face {
            return bad("no streams: give crop anchors or include the face".into());
        }
        self.crop.validate()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pairwise binary MRF over the free labels, plus deterministic ties for
/// labels requested at correlation ±1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelModel {
    /// For every label: (free variable, flipped).
    tie: Vec<(usize, bool)>,
    bias: Vec<f64>,
    /// Row-major `free × free`, symmetric with zero diagonal.
    coupling: Vec<f64>,
}

impl LabelModel {
    pub fn num_free(&self) -> usize {
        self.bias.len()
    }

    /// Groups labels joined by |correlation| = 1 and checks sign/ratio consistency.
    fn ties(ratios: &[f64], corr: &[Vec<f64>]) -> Result<(Vec<(usize, bool)>, Vec<usize>)> {
        let n = ratios.len();
        let mut group: Vec<Option<(usize, bool)>> = vec![None; n];
        let mut reps = Vec::new();
        for root in 0..n {
            if group[root].is_some() {
                continue;
            }
            let free = reps.len();
            reps.push(root);
            group[root] = Some((free, false));
            let mut stack = vec![root];
            while let Some(i) = stack.pop() {
                let (_, flip_i) = group[i].unwrap();
                for j in 0..n {
                    if j == i || corr[i][j].abs() < 1.0 - 1e-12 {
                        continue;
                    }
                    let flip = flip_i ^ (corr[i][j] < 0.0);
                    match group[j] {
                        None => {
                            group[j] = Some((free, flip));
                            stack.push(j);
                        }
                        Some((_, f)) if f != flip => {
                            return Err(Error::Generation(format!(
                                "labels {root} and {j} are required to be both equal and opposite"
                            )));
                        }
                        Some(_) => {}
                    }
                }
            }
        }
        let tie: Vec<(usize, bool)> = group.into_iter().map(Option::unwrap).collect();
        for (j, &(free, flip)) in tie.iter().enumerate() {
            let p_root = ratios[reps[free]];
            let implied = if flip { 1.0 - p_root } else { p_root };
            if (implied - ratios[j]).abs() > 1e-9 {
                return Err(Error::Generation(format!(
                    "label {j} is perfectly correlated with label {} but requests ratio {} instead of {implied}",
                    reps[free], ratios[j]
                )));
            }
        }
        Ok((tie, reps))
    }

    /// Fits biases and couplings so the model's moments match the request.
    pub fn fit(ratios: &[f64], corr: &[Vec<f64>]) -> Result<Self> {
        let (tie, reps) = Self::ties(ratios, corr)?;
        let n = reps.len();
        if n > MAX_FREE_LABELS {
            return Err(Error::Generation(format!(
                "{n} free labels exceed the exact-fitting limit of {MAX_FREE_LABELS}"
            )));
        }
        // (mask over free-variable bits, target moment, parameter slot)
        let mut stats: Vec<(usize, f64, usize)> = Vec::new();
        for (i, &a) in reps.iter().enumerate() {
            stats.push((1 << i, ratios[a], i));
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (reps[i], reps[j]);
                let (pa, pb) = (ratios[a], ratios[b]);
                let sd = (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt();
                let target = corr[a][b] * sd + pa * pb;
                let lo = (pa + pb - 1.0).max(0.0);
                let hi = pa.min(pb);
                if target < lo - 1e-9 || target > hi + 1e-9 {
                    return Err(Error::Generation(format!(
                        "correlation {} between labels {a} and {b} is unreachable with ratios {pa} and {pb}: \
                         joint positive rate {target:.4} outside [{lo:.4}, {hi:.4}]",
                        corr[a][b]
                    )));
                }
                let target = target.clamp(lo + 1e-9, hi - 1e-9).clamp(1e-12, 1.0 - 1e-12);
                stats.push(((1 << i) | (1 << j), target, n + i * n + j));
            }
        }
        let mut bias: Vec<f64> = reps.iter().map(|&a| (ratios[a] / (1.0 - ratios[a])).ln()).collect();
        let mut coupling = vec![0.0; n * n];
        let states = 1usize << n;
        let mut weight: Vec<f64> = (0..states)
            .map(|s| {
                (0..n)
                    .filter(|i| s >> i & 1 == 1)
                    .map(|i| bias[i])
                    .sum::<f64>()
                    .exp()
            })
            .collect();
        for _ in 0..MAX_SWEEPS {
            let mut worst = 0.0f64;
            for &(mask, target, slot) in &stats {
                let total: f64 = weight.iter().sum();
                let hit: f64 = weight
                    .iter()
                    .enumerate()
                    .filter(|(s, _)| s & mask == mask)
                    .map(|(_, w)| w)
                    .sum();
                let q = (hit / total).clamp(1e-300, 1.0 - 1e-16);
                worst = worst.max((q - target).abs());
                let delta = (target * (1.0 - q) / (q * (1.0 - target))).ln();
                if slot < n {
                    bias[slot] += delta;
                } else {
                    let k = slot - n;
                    let (i, j) = (k / n, k % n);
                    coupling[i * n + j] += delta;
                    coupling[j * n + i] += delta;
                }
                let factor = delta.exp();
                for (s, w) in weight.iter_mut().enumerate() {
                    if s & mask == mask {
                        *w *= factor;
                    }
                }
                let total: f64 = weight.iter().sum();
                weight.iter_mut().for_each(|w| *w /= total);
            }
            if worst < 1e-10 {
                break;
            }
        }
        let model = Self { tie, bias, coupling };
        model.check_against(ratios, corr)?;
        Ok(model)
    }

    fn check_against(&self, ratios: &[f64], corr: &[Vec<f64>]) -> Result<()> {
        let (got_r, got_c) = self.exact_moments();
        for (j, (g, want)) in got_r.iter().zip(ratios).enumerate() {
            if (g - want).abs() > RATIO_TOL {
                return Err(Error::Generation(format!(
                    "label {j}: achieved positive ratio {g:.4} vs requested {want:.4}"
                )));
            }
        }
        for i in 0..ratios.len() {
            for j in i + 1..ratios.len() {
                if (got_c[i][j] - corr[i][j]).abs() > CORR_TOL {
                    return Err(Error::Generation(format!(
                        "labels ({i},{j}): achieved correlation {:.4} vs requested {:.4}; \
                         the matrix is not realizable by a pairwise binary model",
                        got_c[i][j], corr[i][j]
                    )));
                }
            }
        }
        Ok(())
    }

    fn free_energy(&self, s: usize) -> f64 {
        let n = self.num_free();
        let mut e = 0.0;
        for i in 0..n {
            if s >> i & 1 == 1 {
                e += self.bias[i];
                for j in i + 1..n {
                    if s >> j & 1 == 1 {
                        e += self.coupling[i * n + j];
                    }
                }
            }
        }
        e
    }

    fn expand(&self, free: &[bool]) -> Vec<u8> {
        self.tie.iter().map(|&(f, flip)| (free[f] ^ flip) as u8).collect()
    }

    /// Exact positive ratios and Pearson correlations of all labels.
    pub fn exact_moments(&self) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = self.num_free();
        let labels = self.tie.len();
        let logw: Vec<f64> = (0..1usize << n).map(|s| self.free_energy(s)).collect();
        let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut mean = vec![0.0; labels];
        let mut joint = vec![vec![0.0; labels]; labels];
        for (s, &ws) in w.iter().enumerate() {
            let free: Vec<bool> = (0..n).map(|i| s >> i & 1 == 1).collect();
            let y = self.expand(&free);
            let p = ws / total;
            for a in 0..labels {
                if y[a] == 1 {
                    mean[a] += p;
                    for b in 0..labels {
                        if y[b] == 1 {
                            joint[a][b] += p;
                        }
                    }
                }
            }
        }
        let mut corr = vec![vec![0.0; labels]; labels];
        for a in 0..labels {
            for b in 0..labels {
                let denom = (mean[a] * (1.0 - mean[a]) * mean[b] * (1.0 - mean[b])).sqrt();
                corr[a][b] = if denom > 0.0 {
                    (joint[a][b] - mean[a] * mean[b]) / denom
                } else {
                    0.0
                };
            }
        }
        (mean, corr)
    }

    /// One label vector from a fresh Gibbs chain after `burn_in` sweeps.
    pub fn sample<R: Rng>(&self, rng: &mut R, burn_in: usize) -> Vec<u8> {
        let n = self.num_free();
        let mut state: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
        for _ in 0..burn_in {
            for i in 0..n {
                let field = self.bias[i]
                    + (0..n)
                        .filter(|&j| j != i && state[j])
                        .map(|j| self.coupling[i * n + j])
                        .sum::<f64>();
                state[i] = rng.random::<f64>() < sigmoid(field);
            }
        }
        self.expand(&state)
    }
}

struct SubjectLook {
    background: [f64; 3],
    gain: f64,
    offset: (isize, isize),
}

impl SubjectLook {
    /// Always consumes the same draws, whatever the jitter scale.
    fn draw(rng: &mut ChaCha8Rng, patch_size: usize, jitter: f64) -> Self {
        let reach = (patch_size / 8).max(1) as i64;
        let mut shade = || 0.35 + jitter * rng.random_range(-0.15..0.15);
        let background = [shade(), shade(), shade()];
        let gain = 1.0 - jitter * rng.random_range(0.0..0.3);
        let mut shift = || (jitter * rng.random_range(-reach..=reach) as f64).round() as isize;
        let offset = (shift(), shift());
        Self {
            background,
            gain,
            offset,
        }
    }
}

/// Paints the glyph of `label` around `center` into channel `label % 3`.
fn paint_glyph(face: &mut [f64], side: usize, label: usize, kind: usize, center: (isize, isize), size: usize, amp: f64) {
    let g = size as isize;
    let th = (size / 3).max(1) as isize;
    let (cr, cc) = center;
    let (r0, c0) = (cr - g / 2, cc - g / 2);
    let ch = label % 3;
    let mut put = |r: isize, c: isize| {
        if r >= 0 && c >= 0 && (r as usize) < side && (c as usize) < side {
            let idx = (r as usize * side + c as usize) * 3 + ch;
            face[idx] += amp;
        }
    };
    for a in 0..g {
        for t in 0..th {
            match kind % 4 {
                0 => put(cr - th / 2 + t, c0 + a),
                1 => put(r0 + a, cc - th / 2 + t),
                2 => put(r0 + a, c0 + a + t),
                _ => {
                    if t == 0 {
                        put(r0, c0 + a);
                        put(r0 + g - 1, c0 + a);
                        put(r0 + a, c0);
                        put(r0 + a, c0 + g - 1);
                    }
                }
            }
        }
    }
}

fn render_face(spec: &SyntheticSpec, look: &SubjectLook, labels: &[u8], rng: &mut ChaCha8Rng) -> Tensor {
    let side = spec.crop.face_size;
    let mut face = vec![0.0; side * side * 3];
    for px in face.chunks_exact_mut(3) {
        px.copy_from_slice(&look.background);
    }
    let regions = spec.crop.anchors.len().max(1);
    let glyph = (spec.crop.patch_size * 3 / 8).max(3);
    for (j, &y) in labels.iter().enumerate() {
        // inactive labels still consume draws so streams stay aligned
        let amp = look.gain * rng.random_range(0.5..1.0);
        let jitter = (rng.random_range(-1i64..=1) as isize, rng.random_range(-1i64..=1) as isize);
        let hidden = rng.random::<f64>() < spec.glyph_dropout;
        if y == 0 || hidden {
            continue;
        }
        let (ar, ac) = spec
            .crop
            .anchors
            .get(j % regions)
            .copied()
            .unwrap_or((side / 2, side / 2));
        let center = (
            ar as isize + look.offset.0 + jitter.0,
            ac as isize + look.offset.1 + jitter.1,
        );
        paint_glyph(&mut face, side, j, j / regions + j, center, glyph, amp);
    }
    if spec.glyph_noise > 0.0 {
        let noise = Normal::new(0.0, spec.glyph_noise).expect("validated noise");
        for v in face.iter_mut() {
            *v += noise.sample(rng);
        }
    }
    face.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new([side, side, 3], face).expect("face shape")
}

/// Deterministic in `spec` (including its seed) regardless of evaluation order.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let model = LabelModel::fit(&spec.positive_ratios, &spec.correlations)?;
    let mut dataset = Dataset::new(spec.num_labels, spec.geometry());
    for s in 0..spec.subjects {
        let mut subject_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        subject_rng.set_stream(SUBJECT_STREAM_BASE + s as u64);
        let look = SubjectLook::draw(&mut subject_rng, spec.crop.patch_size, spec.appearance_jitter);
        for k in 0..spec.samples_per_subject {
            let index = s * spec.samples_per_subject + k;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(index as u64);
            let labels = model.sample(&mut rng, spec.burn_in);
            let face = render_face(spec, &look, &labels, &mut rng);
            let mut patches = crop_patches(&face, &spec.crop)?;
            if spec.include_face {
                patches.push(face);
            }
            dataset.push(Sample {
                id: format!("s{s:03}_{k:05}"),
                subject: format!("subj{s:03}"),
                patches,
                face: None,
                labels,
            })?;
        }
    }
    Ok(dataset)
}
