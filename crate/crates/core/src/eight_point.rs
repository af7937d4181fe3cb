//! Constrained linear estimation of the skew-symmetric reflective
//! fundamental matrix and its decomposition into a mirror plane.

use nalgebra::{Matrix3, SMatrix, SVector, SymmetricEigen, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{
    extrinsics_from_mirror, normalize_frobenius, skew_project, skew_vector, Intrinsics, MirrorPlane, ReflectiveEssential,
    ReflectiveFundamental, VirtualExtrinsics,
};
use crate::scalar::Scalar;
use crate::tracks::JointTracks;
use crate::triangulation::{triangulate_point, StereoRig};

/// Minimum number of pairs accepted by the constrained solver.
pub const MIN_PAIRS: usize = 6;

/// Maximum number of pairs triangulated when resolving the mirror side.
pub const CHEIRALITY_SAMPLE: usize = 50;

/// One real/mirror pixel correspondence, tagged with its origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence<T: Scalar> {
    pub real: Vector2<T>,
    pub mirror: Vector2<T>,
    pub frame: usize,
    pub joint: usize,
}

/// At least [`MIN_PAIRS`] finite correspondences, not all identical.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceSet<T: Scalar> {
    pairs: Vec<Correspondence<T>>,
}

impl<T: Scalar> CorrespondenceSet<T> {
    pub fn new(pairs: Vec<Correspondence<T>>) -> Result<Self> {
        if pairs.len() < MIN_PAIRS {
            return Err(Error::TooFewPairs { needed: MIN_PAIRS, got: pairs.len() });
        }
        let finite = pairs.iter().all(|p| {
            p.real.iter().chain(p.mirror.iter()).all(|v| v.is_finite())
        });
        if !finite {
            return Err(Error::DegenerateConfiguration("non-finite pixel coordinate".into()));
        }
        let first = pairs[0];
        if pairs.iter().all(|p| p.real == first.real && p.mirror == first.mirror) {
            return Err(Error::DegenerateCloud);
        }
        Ok(Self { pairs })
    }

    /// All valid entries of `tracks`, frame-major.
    pub fn from_tracks(tracks: &JointTracks<T>) -> Result<Self> {
        let pairs = tracks
            .pairs()
            .map(|(k, real, mirror)| Correspondence {
                real,
                mirror,
                frame: k / tracks.n_joints,
                joint: k % tracks.n_joints,
            })
            .collect::<Vec<_>>();
        if pairs.is_empty() {
            return Err(Error::EmptyCorrespondenceSet);
        }
        Self::new(pairs)
    }

    pub fn pairs(&self) -> &[Correspondence<T>] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Subset by index; fails if fewer than [`MIN_PAIRS`] remain.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.pairs[i]).collect())
    }
}

/// Isotropic similarity `p ↦ s(p − c)` in homogeneous form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationTransform<T: Scalar> {
    matrix: Matrix3<T>,
}

impl<T: Scalar> NormalizationTransform<T> {
    pub fn new(scale: T, centroid: Vector2<T>) -> Self {
        let (z, o) = (T::zero(), T::one());
        Self {
            matrix: Matrix3::new(scale, z, -scale * centroid.x, z, scale, -scale * centroid.y, z, z, o),
        }
    }

    pub fn matrix(&self) -> &Matrix3<T> {
        &self.matrix
    }

    pub fn scale(&self) -> T {
        self.matrix[(0, 0)]
    }

    pub fn apply(&self, p: &Vector2<T>) -> Vector2<T> {
        let s = self.scale();
        Vector2::new(s * p.x + self.matrix[(0, 2)], s * p.y + self.matrix[(1, 2)])
    }
}

/// Hartley normalization: zero centroid, mean distance √2.
pub fn normalize_points<T: Scalar>(points: &[Vector2<T>]) -> Result<(Vec<Vector2<T>>, NormalizationTransform<T>)> {
    if points.len() < 2 {
        return Err(Error::DegenerateCloud);
    }
    let n = T::from_usize_lossy(points.len());
    let centroid = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let mean_dist = points.iter().fold(T::zero(), |a, p| a + (p - centroid).norm()) / n;
    if !(mean_dist > T::zero()) || !mean_dist.is_finite() {
        return Err(Error::DegenerateCloud);
    }
    let tf = NormalizationTransform::new(T::lit(2.0).sqrt() / mean_dist, centroid);
    Ok((points.iter().map(|p| tf.apply(p)).collect(), tf))
}

/// Row of the constrained design matrix for normalized `(û, v̂)` ↔ `(û', v̂')`.
#[inline]
fn design_row<T: Scalar>(x: &Vector2<T>, xp: &Vector2<T>) -> SVector<T, 6> {
    SVector::<T, 6>::from([
        -xp.y * x.x + xp.x * x.y,
        xp.x,
        xp.y,
        x.x,
        x.y,
        T::one(),
    ])
}

/// Assembles `F' = [[0, x1, x2], [−x1, 0, x3], [x4, x5, x6]]`.
pub fn constrained_matrix<T: Scalar>(f: &SVector<T, 6>) -> Matrix3<T> {
    let z = T::zero();
    Matrix3::new(z, f[0], f[1], -f[0], z, f[2], f[3], f[4], f[5])
}

fn is_collinear<T: Scalar>(points: &[Vector2<T>]) -> bool {
    // points are already centred; inspect the 2×2 scatter
    let (mut sxx, mut sxy, mut syy) = (T::zero(), T::zero(), T::zero());
    for p in points {
        sxx += p.x * p.x;
        sxy += p.x * p.y;
        syy += p.y * p.y;
    }
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    det <= T::lit(1e-12) * tr * tr
}

/// Diagnostics of one constrained solve.
#[derive(Debug, Clone, Copy)]
pub struct ConstrainedSolve<T: Scalar> {
    pub fundamental: ReflectiveFundamental<T>,
    /// Unit vector minimizing `‖Âf'‖`.
    pub parameters: SVector<T, 6>,
    /// Smallest eigenvalue of `ÂᵀÂ`.
    pub min_eigenvalue: T,
    /// `‖Âf'‖²` recomputed from the rows.
    pub residual_squared: T,
    pub real_normalization: NormalizationTransform<T>,
    pub mirror_normalization: NormalizationTransform<T>,
}

/// Solves the 6-parameter normalized problem and denormalizes.
pub fn solve_constrained_fundamental<T: Scalar>(corr: &CorrespondenceSet<T>) -> Result<ReflectiveFundamental<T>> {
    solve_constrained_detailed(corr).map(|s| s.fundamental)
}

pub fn solve_constrained_detailed<T: Scalar>(corr: &CorrespondenceSet<T>) -> Result<ConstrainedSolve<T>> {
    let pairs = corr.pairs();
    if pairs.len() < MIN_PAIRS {
        return Err(Error::TooFewPairs { needed: MIN_PAIRS, got: pairs.len() });
    }
    let real: Vec<_> = pairs.iter().map(|p| p.real).collect();
    let mirror: Vec<_> = pairs.iter().map(|p| p.mirror).collect();
    let (nr, tr) = normalize_points(&real)?;
    let (nm, tm) = normalize_points(&mirror)?;
    if is_collinear(&nr) || is_collinear(&nm) {
        return Err(Error::DegenerateConfiguration("correspondences are collinear in one view".into()));
    }

    let mut gram = SMatrix::<T, 6, 6>::zeros();
    for (x, xp) in nr.iter().zip(&nm) {
        let row = design_row(x, xp);
        gram += row * row.transpose();
    }
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..6).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .partial_cmp(&eig.eigenvalues[b])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let (l0, l1, lmax) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]], eig.eigenvalues[order[5]]);
    if !lmax.is_finite() {
        return Err(Error::DegenerateConfiguration("non-finite design matrix".into()));
    }
    if l1 - l0 <= T::lit(1e-12) * lmax.max(T::one()) {
        return Err(Error::DegenerateConfiguration(
            "smallest eigenvalues of the design Gram matrix coincide".into(),
        ));
    }
    let params: SVector<T, 6> = eig.eigenvectors.column(order[0]).into();
    let residual_squared = nr
        .iter()
        .zip(&nm)
        .fold(T::zero(), |a, (x, xp)| a + design_row(x, xp).dot(&params).powi(2));

    let f_norm = constrained_matrix(&params);
    let f = tm.matrix().transpose() * f_norm * tr.matrix();
    let f = normalize_frobenius(&skew_project(&f)).ok_or(Error::DegenerateConfiguration(
        "denormalized fundamental matrix has no skew part".into(),
    ))?;
    Ok(ConstrainedSolve {
        fundamental: ReflectiveFundamental(canonical_sign(f)),
        parameters: params,
        min_eigenvalue: l0,
        residual_squared,
        real_normalization: tr,
        mirror_normalization: tm,
    })
}

/// Fixes the sign ambiguity of a scale-free matrix: the entry of largest
/// magnitude is made positive.
fn canonical_sign<T: Scalar>(m: Matrix3<T>) -> Matrix3<T> {
    let mut best = T::zero();
    let mut sign = T::one();
    for v in m.iter() {
        if v.abs() > best {
            best = v.abs();
            sign = if *v < T::zero() { -T::one() } else { T::one() };
        }
    }
    m * sign
}

/// `E = KᵀFK`, projected onto skew matrices, unit norm.
pub fn essential_from_fundamental<T: Scalar>(
    f: &ReflectiveFundamental<T>,
    k: &Intrinsics<T>,
) -> Result<ReflectiveEssential<T>> {
    k.inverse()?;
    let km = k.matrix();
    let e = km.transpose() * f.0 * km;
    normalize_frobenius(&skew_project(&e))
        .map(ReflectiveEssential)
        .ok_or(Error::ZeroEssential)
}

/// Correspondences and intrinsics used to pick the mirror side.
#[derive(Debug, Clone, Copy)]
pub struct CheiralityCheck<'a, T: Scalar> {
    pub intrinsics: &'a Intrinsics<T>,
    pub pairs: &'a [Correspondence<T>],
}

/// Number of evenly strided pairs (at most [`CHEIRALITY_SAMPLE`]) that
/// triangulate in front of both cameras.
pub fn cheirality_votes<T: Scalar>(
    k: &Intrinsics<T>,
    ext: &VirtualExtrinsics<T>,
    pairs: &[Correspondence<T>],
) -> usize {
    if pairs.is_empty() {
        return 0;
    }
    let rig = StereoRig::new(k, ext);
    let step = pairs.len().div_ceil(CHEIRALITY_SAMPLE).max(1);
    pairs
        .iter()
        .step_by(step)
        .filter(|p| match triangulate_point(&rig, &p.real, &p.mirror) {
            Ok(x) => {
                let (z, zv) = rig.depths(&x);
                z > T::zero() && zv > T::zero()
            }
            Err(_) => false,
        })
        .count()
}

/// Inverts `E = 2d[n]×`: the skew vector gives the normal direction and
/// `2d`. The sign of `n` is resolved by a cheirality vote when pairs are
/// supplied, otherwise the normal with non-negative z is chosen.
pub fn extract_mirror<T: Scalar>(
    e: &ReflectiveEssential<T>,
    check: Option<CheiralityCheck<'_, T>>,
) -> Result<(MirrorPlane<T>, VirtualExtrinsics<T>)> {
    let w = e.skew_vector();
    let len = w.norm();
    if !(len > T::zero()) || !len.is_finite() {
        return Err(Error::ZeroEssential);
    }
    let d = len / T::lit(2.0);
    let forward = if w.z >= T::zero() { w } else { -w };
    let candidates = [forward, -forward];
    let mirrors: Vec<MirrorPlane<T>> = candidates
        .iter()
        .map(|n| MirrorPlane::new(*n, d))
        .collect::<Result<_>>()?;
    let chosen = match check {
        None => mirrors[0],
        Some(c) => {
            let votes: Vec<usize> = mirrors
                .iter()
                .map(|m| cheirality_votes(c.intrinsics, &extrinsics_from_mirror(m), c.pairs))
                .collect();
            if votes[0] == 0 && votes[1] == 0 {
                return Err(Error::CheiralityUndecidable);
            }
            if votes[1] > votes[0] {
                mirrors[1]
            } else {
                mirrors[0]
            }
        }
    };
    Ok((chosen, extrinsics_from_mirror(&chosen)))
}

/// Everything the constrained estimator produces for one correspondence set.
#[derive(Debug, Clone, Copy)]
pub struct MirrorEstimate<T: Scalar> {
    pub fundamental: ReflectiveFundamental<T>,
    pub essential: ReflectiveEssential<T>,
    pub mirror: MirrorPlane<T>,
    pub extrinsics: VirtualExtrinsics<T>,
}

/// Solve → essential → decomposition, with the cheirality vote over `corr`.
pub fn estimate_mirror<T: Scalar>(corr: &CorrespondenceSet<T>, k: &Intrinsics<T>) -> Result<MirrorEstimate<T>> {
    let fundamental = solve_constrained_fundamental(corr)?;
    let essential = essential_from_fundamental(&fundamental, k)?;
    let (mirror, extrinsics) = extract_mirror(
        &essential,
        Some(CheiralityCheck { intrinsics: k, pairs: corr.pairs() }),
    )?;
    Ok(MirrorEstimate { fundamental, essential, mirror, extrinsics })
}

/// Direction error between two scale-free 3×3 matrices, insensitive to sign.
pub fn matrix_direction_error<T: Scalar>(a: &Matrix3<T>, b: &Matrix3<T>) -> T {
    let (a, b) = (a / a.norm(), b / b.norm());
    (a - b).norm().min((a + b).norm())
}

/// Unit skew vectors compared up to sign.
pub fn axis_error<T: Scalar>(a: &Vector3<T>, b: &Vector3<T>) -> T {
    let (a, b) = (a.normalize(), b.normalize());
    (a - b).norm().min((a + b).norm())
}

/// Skew vector of the denormalized `F'` for parameters `v`; linear in `v`.
fn denormalized_skew<T: Scalar>(v: &SVector<T, 6>, tr: &NormalizationTransform<T>, tm: &NormalizationTransform<T>) -> Vector3<T> {
    skew_vector(&(tm.matrix().transpose() * constrained_matrix(v) * tr.matrix()))
}

/// Pulls a gradient on the estimated mirror normal back onto the pixel
/// coordinates of the pairs (vector-Jacobian product of the constrained
/// solve). `normal` fixes the sign branch; the Hartley normalizations are
/// differentiated as well.
pub fn mirror_normal_vjp<T: Scalar>(
    corr: &CorrespondenceSet<T>,
    k: &Intrinsics<T>,
    normal: &Vector3<T>,
    grad_normal: &Vector3<T>,
) -> Result<(Vec<Vector2<T>>, Vec<Vector2<T>>)> {
    let pairs = corr.pairs();
    let n_pts = pairs.len();
    let real: Vec<_> = pairs.iter().map(|p| p.real).collect();
    let mirror: Vec<_> = pairs.iter().map(|p| p.mirror).collect();
    let (nr, tr) = normalize_points(&real)?;
    let (nm, tm) = normalize_points(&mirror)?;
    let rows: Vec<SVector<T, 6>> = nr.iter().zip(&nm).map(|(x, xp)| design_row(x, xp)).collect();
    let gram = rows.iter().fold(SMatrix::<T, 6, 6>::zeros(), |g, a| g + a * a.transpose());
    let eig = SymmetricEigen::new(gram);
    let i0 = eig.eigenvalues.imin();
    let v: SVector<T, 6> = eig.eigenvectors.column(i0).into();
    let kinv = k.inverse()?;

    // normal = σ m/|m| with m = K⁻¹w
    let w = denormalized_skew(&v, &tr, &tm);
    let m = kinv * w;
    let len = m.norm();
    if !(len > T::zero()) {
        return Err(Error::ZeroEssential);
    }
    let mh = m / len;
    let sigma = if mh.dot(normal) >= T::zero() { T::one() } else { -T::one() };
    let g_m = (grad_normal - mh * mh.dot(grad_normal)) * (sigma / len);
    let g_w = kinv.transpose() * g_m;

    let mut g_v = SVector::<T, 6>::zeros();
    for j in 0..6 {
        g_v[j] = g_w.dot(&denormalized_skew(&SVector::<T, 6>::ith(j, T::one()), &tr, &tm));
    }
    // dv = -(G - λ₀)⁺ dG v
    let mut r = SVector::<T, 6>::zeros();
    for j in 0..6 {
        if j != i0 {
            let e: SVector<T, 6> = eig.eigenvectors.column(j).into();
            r += e * (e.dot(&g_v) / (eig.eigenvalues[j] - eig.eigenvalues[i0]));
        }
    }

    // gradients on the normalization parameters (scale, centroid) of each view
    let params = |t: &NormalizationTransform<T>| {
        let s = t.scale();
        (s, Vector2::new(-t.matrix()[(0, 2)] / s, -t.matrix()[(1, 2)] / s))
    };
    let (sr, cr) = params(&tr);
    let (sm, cm) = params(&tm);
    let h = T::lit(1e-6);
    let w_of = |sr: T, cr: Vector2<T>, sm: T, cm: Vector2<T>| {
        g_w.dot(&denormalized_skew(&v, &NormalizationTransform::new(sr, cr), &NormalizationTransform::new(sm, cm)))
    };
    let fd = |f: &dyn Fn(T) -> T| (f(h) - f(-h)) / (T::lit(2.0) * h);
    let mut g_sr = fd(&|e| w_of(sr * (T::one() + e), cr, sm, cm)) / sr;
    let mut g_sm = fd(&|e| w_of(sr, cr, sm * (T::one() + e), cm)) / sm;
    let mut g_cr = Vector2::new(
        fd(&|e| w_of(sr, cr + Vector2::new(e, T::zero()), sm, cm)),
        fd(&|e| w_of(sr, cr + Vector2::new(T::zero(), e), sm, cm)),
    );
    let mut g_cm = Vector2::new(
        fd(&|e| w_of(sr, cr, sm, cm + Vector2::new(e, T::zero()))),
        fd(&|e| w_of(sr, cr, sm, cm + Vector2::new(T::zero(), e))),
    );

    let mut g_real = vec![Vector2::zeros(); n_pts];
    let mut g_mirror = vec![Vector2::zeros(); n_pts];
    for i in 0..n_pts {
        let a = &rows[i];
        let g_a = -(r * a.dot(&v) + v * a.dot(&r));
        let (x, xp) = (nr[i], nm[i]);
        let gx = Vector2::new(g_a[3] - g_a[0] * xp.y, g_a[4] + g_a[0] * xp.x);
        let gxp = Vector2::new(g_a[1] + g_a[0] * x.y, g_a[2] - g_a[0] * x.x);
        g_real[i] = gx * sr;
        g_mirror[i] = gxp * sm;
        g_sr += gx.dot(&(real[i] - cr));
        g_sm += gxp.dot(&(mirror[i] - cm));
        g_cr -= gx * sr;
        g_cm -= gxp * sm;
    }
    // s = √2 / mean|p - c|, c = mean p
    let spread = |pts: &[Vector2<T>], c: &Vector2<T>, s: T, g_s: T, g_c: Vector2<T>, out: &mut [Vector2<T>]| {
        let nf = T::from_usize_lossy(pts.len());
        let units: Vec<Vector2<T>> = pts
            .iter()
            .map(|p| {
                let d = p - c;
                let l = d.norm();
                if l > T::zero() { d / l } else { Vector2::zeros() }
            })
            .collect();
        let mean_u = units.iter().fold(Vector2::zeros(), |a, u| a + u) / nf;
        let mean_dist = T::lit(2.0).sqrt() / s;
        let g_md = -g_s * s / mean_dist;
        for (o, u) in out.iter_mut().zip(&units) {
            *o += g_c / nf + (u - mean_u) * (g_md / nf);
        }
    };
    spread(&real, &cr, sr, g_sr, g_cr, &mut g_real);
    spread(&mirror, &cm, sm, g_sm, g_cm, &mut g_mirror);
    Ok((g_real, g_mirror))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{essential_from_mirror, fundamental_from_essential, project, real_projection_matrix, reflect_point};
    use crate::metrics::rotation_error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn test_k() -> Intrinsics<f64> {
        Intrinsics { fx: 1100.0, fy: 1100.0, cx: 960.0, cy: 540.0, skew: 0.0 }
    }

    pub(crate) fn synthetic_pairs(
        rng: &mut impl Rng,
        k: &Intrinsics<f64>,
        mirror: &MirrorPlane<f64>,
        n: usize,
    ) -> Vec<Correspondence<f64>> {
        let p = real_projection_matrix(k);
        let mut out = Vec::new();
        while out.len() < n {
            let x = Vector3::new(rng.random_range(-0.9..0.9), rng.random_range(-0.9..0.9), rng.random_range(0.8..1.6));
            if mirror.normal().dot(&x) >= mirror.distance() {
                continue;
            }
            let (Ok(u), Ok(up)) = (project(&p, &x), project(&p, &reflect_point(&x, mirror))) else {
                continue;
            };
            out.push(Correspondence { real: u, mirror: up, frame: out.len(), joint: 0 });
        }
        out
    }

    pub(crate) fn random_front_mirror(rng: &mut impl Rng) -> MirrorPlane<f64> {
        let n = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0);
        MirrorPlane::new(n, rng.random_range(1.5..4.0)).unwrap()
    }

    #[test]
    fn normal_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let k = test_k();
        for _ in 0..5 {
            let m = random_front_mirror(&mut rng);
            let mut pairs = synthetic_pairs(&mut rng, &k, &m, 40);
            for p in pairs.iter_mut() {
                p.real += Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                p.mirror += Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
            }
            let corr = CorrespondenceSet::new(pairs.clone()).unwrap();
            let n0 = *estimate_mirror(&corr, &k).unwrap().mirror.normal();
            let g = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (gr, gm) = mirror_normal_vjp(&corr, &k, &n0, &g).unwrap();
            let f = |pairs: &[Correspondence<f64>]| {
                let n = *estimate_mirror(&CorrespondenceSet::new(pairs.to_vec()).unwrap(), &k).unwrap().mirror.normal();
                let n = if n.dot(&n0) < 0.0 { -n } else { n };
                g.dot(&n)
            };
            let h = 1e-4;
            let (mut num, mut ana) = (Vec::new(), Vec::new());
            for i in 0..pairs.len() {
                for c in 0..4 {
                    let mut a = pairs.clone();
                    let mut b = pairs.clone();
                    let (pa, pb) = if c < 2 { (&mut a[i].real[c], &mut b[i].real[c]) } else { (&mut a[i].mirror[c - 2], &mut b[i].mirror[c - 2]) };
                    *pa += h;
                    *pb -= h;
                    num.push((f(&a) - f(&b)) / (2.0 * h));
                    ana.push(if c < 2 { gr[i][c] } else { gm[i][c - 2] });
                }
            }
            let diff: f64 = num.iter().zip(&ana).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm: f64 = num.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!(diff < 1e-4 * norm, "{diff} {norm}");
        }
    }

    #[test]
    fn normalization_examples() {
        let pts = [Vector2::new(0.0, 0.0), Vector2::new(2.0, 0.0), Vector2::new(0.0, 2.0), Vector2::new(2.0, 2.0)];
        let (n, t) = normalize_points(&pts).unwrap();
        let c = n.iter().fold(Vector2::zeros(), |a, p| a + p) / 4.0;
        assert!(c.norm() < 1e-12);
        let r: f64 = n.iter().map(|p| p.norm()).sum::<f64>() / 4.0;
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        // already normalized cloud: zero shift, unit scale
        let (_, t2): (_, NormalizationTransform<f64>) = normalize_points(&n).unwrap();
        assert!((t2.scale() - 1.0).abs() < 1e-9);
        assert!(t2.matrix()[(0, 2)].abs() < 1e-9 && t2.matrix()[(1, 2)].abs() < 1e-9);
        assert!(t.scale() > 0.0);
        assert_eq!(normalize_points(&[Vector2::new(1.0, 1.0); 3]).unwrap_err(), Error::DegenerateCloud);
    }

    #[test]
    fn normalization_is_self_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let pts: Vec<Vector2<f64>> = (0..100)
            .map(|_| Vector2::new(rng.random_range(0.0..1920.0), rng.random_range(0.0..1080.0)))
            .collect();
        let (n, t) = normalize_points(&pts).unwrap();
        for (p, q) in pts.iter().zip(&n) {
            let h = t.matrix() * p.push(1.0);
            assert!((Vector2::new(h.x, h.y) - q).norm() < 1e-12);
        }
        let c = n.iter().fold(Vector2::zeros(), |a, p| a + p) / 100.0;
        assert!(c.norm() < 1e-9);
        let r: f64 = n.iter().map(|p| p.norm()).sum::<f64>() / 100.0;
        assert!((r - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn noiseless_pairs_recover_ground_truth_fundamental() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let k = test_k();
        for _ in 0..20 {
            let m = random_front_mirror(&mut rng);
            let corr = CorrespondenceSet::new(synthetic_pairs(&mut rng, &k, &m, 50)).unwrap();
            let f = solve_constrained_fundamental(&corr).unwrap();
            let gt = fundamental_from_essential(&essential_from_mirror(&m), &k).unwrap();
            assert!(matrix_direction_error(&f.0, &gt.0) < 1e-6);
            assert!((f.0 + f.0.transpose()).norm() < 1e-12);
        }
    }

    #[test]
    fn duplicating_pairs_leaves_solution_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let k = test_k();
        let m = random_front_mirror(&mut rng);
        let mut pairs = synthetic_pairs(&mut rng, &k, &m, 30);
        for p in pairs.iter_mut() {
            p.real += Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        }
        let once = solve_constrained_fundamental(&CorrespondenceSet::new(pairs.clone()).unwrap()).unwrap();
        let doubled: Vec<_> = pairs.iter().chain(pairs.iter()).copied().collect();
        let twice = solve_constrained_fundamental(&CorrespondenceSet::new(doubled).unwrap()).unwrap();
        assert!(matrix_direction_error(&once.0, &twice.0) < 1e-12);
    }

    #[test]
    fn too_few_pairs_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let k = test_k();
        let m = random_front_mirror(&mut rng);
        let pairs = synthetic_pairs(&mut rng, &k, &m, 5);
        assert_eq!(CorrespondenceSet::new(pairs).unwrap_err(), Error::TooFewPairs { needed: 6, got: 5 });
    }

    #[test]
    fn collinear_views_rejected() {
        let pairs: Vec<_> = (0..10)
            .map(|i| Correspondence {
                real: Vector2::new(i as f64, 2.0 * i as f64),
                mirror: Vector2::new(3.0 * i as f64, 7.0 + (i * i) as f64),
                frame: i,
                joint: 0,
            })
            .collect();
        let corr = CorrespondenceSet::new(pairs).unwrap();
        assert!(matches!(solve_constrained_fundamental(&corr), Err(Error::DegenerateConfiguration(_))));
    }

    #[test]
    fn eigen_solver_contract() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let k = test_k();
        let m = random_front_mirror(&mut rng);
        let mut pairs = synthetic_pairs(&mut rng, &k, &m, 200);
        for p in pairs.iter_mut() {
            p.mirror += Vector2::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        }
        let s = solve_constrained_detailed(&CorrespondenceSet::new(pairs).unwrap()).unwrap();
        assert!((s.parameters.norm() - 1.0).abs() < 1e-12);
        assert!((s.residual_squared - s.min_eigenvalue).abs() <= 1e-9 * s.min_eigenvalue);
    }

    #[test]
    fn essential_from_fundamental_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let ident = Intrinsics { fx: 1.0, fy: 1.0, cx: 0.0, cy: 0.0, skew: 0.0 };
        let m = random_front_mirror(&mut rng);
        let f = fundamental_from_essential(&essential_from_mirror(&m), &ident).unwrap();
        let e = essential_from_fundamental(&f, &ident).unwrap();
        assert!((e.0 - f.0).norm() < 1e-15);

        let k = Intrinsics { fx: 900.0, fy: 870.0, cx: 610.0, cy: 350.0, skew: 0.7 };
        for _ in 0..100 {
            let m = random_front_mirror(&mut rng);
            let e0 = essential_from_mirror(&m).normalized().unwrap();
            let f = fundamental_from_essential(&e0, &k).unwrap();
            let e1 = essential_from_fundamental(&f, &k).unwrap();
            assert!(matrix_direction_error(&e0.0, &e1.0) < 1e-9);
        }
        let bad = Intrinsics { fx: 0.0, fy: 1.0, cx: 0.0, cy: 0.0, skew: 0.0 };
        assert!(matches!(essential_from_fundamental(&f, &bad), Err(Error::SingularIntrinsics { .. })));
    }

    #[test]
    fn extract_mirror_by_inspection() {
        let e = ReflectiveEssential(Matrix3::new(0.0, -2.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        let (m, _) = extract_mirror(&e, None).unwrap();
        assert_eq!(*m.normal(), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(2.0 * m.distance(), 2.0);
        let neg = ReflectiveEssential(-e.0);
        let (m2, _) = extract_mirror(&neg, None).unwrap();
        assert_eq!(m2.normal(), m.normal());
        assert_eq!(extract_mirror(&ReflectiveEssential(Matrix3::<f64>::zeros()), None).unwrap_err(), Error::ZeroEssential);
    }

    #[test]
    fn extract_mirror_round_trip_and_eq8_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        for _ in 0..200 {
            let m = random_front_mirror(&mut rng);
            let e = essential_from_mirror(&m);
            let (back, ext) = extract_mirror(&e, None).unwrap();
            assert!((back.normal() - m.normal()).norm() < 1e-9);
            let composed = normalize_frobenius(&ext.essential()).unwrap();
            assert!(matrix_direction_error(&composed, &e.0) < 1e-9);
            let x = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.5..2.0));
            assert!((ext.transform_point(&x) - reflect_point(&x, &back)).norm() < 1e-9);
        }
    }

    #[test]
    fn cheirality_picks_the_mirror_in_front_for_either_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let k = test_k();
        for _ in 0..20 {
            // include mirrors whose normal has a small z component
            let n = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.7..1.0));
            let m = MirrorPlane::new(n, rng.random_range(1.5..4.0)).unwrap();
            let pairs = synthetic_pairs(&mut rng, &k, &m, 40);
            for sign in [1.0, -1.0] {
                let e = ReflectiveEssential(essential_from_mirror(&m).0 * sign);
                let (got, _) = extract_mirror(&e, Some(CheiralityCheck { intrinsics: &k, pairs: &pairs })).unwrap();
                assert!((got.normal() - m.normal()).norm() < 1e-9);
            }
        }
        let empty: [Correspondence<f64>; 0] = [];
        let e = essential_from_mirror(&random_front_mirror(&mut rng));
        assert_eq!(
            extract_mirror(&e, Some(CheiralityCheck { intrinsics: &k, pairs: &empty })).unwrap_err(),
            Error::CheiralityUndecidable
        );
    }

    #[test]
    fn noiseless_end_to_end_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let k = test_k();
        for _ in 0..20 {
            let m = random_front_mirror(&mut rng);
            let corr = CorrespondenceSet::new(synthetic_pairs(&mut rng, &k, &m, 60)).unwrap();
            let est = estimate_mirror(&corr, &k).unwrap();
            let gt = extrinsics_from_mirror(&m);
            assert!(rotation_error(&est.extrinsics.rotation, &gt.rotation).unwrap() < 1e-6);
        }
    }

    #[test]
    fn pixel_shift_with_matching_principal_point_preserves_normal() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        let k = test_k();
        let m = random_front_mirror(&mut rng);
        let pairs = synthetic_pairs(&mut rng, &k, &m, 80);
        let a = estimate_mirror(&CorrespondenceSet::new(pairs.clone()).unwrap(), &k).unwrap();
        let off = Vector2::new(137.0, -58.0);
        let shifted: Vec<_> = pairs
            .iter()
            .map(|p| Correspondence { real: p.real + off, mirror: p.mirror + off, ..*p })
            .collect();
        let k2 = Intrinsics { cx: k.cx + off.x, cy: k.cy + off.y, ..k };
        let b = estimate_mirror(&CorrespondenceSet::new(shifted).unwrap(), &k2).unwrap();
        assert!((a.mirror.normal() - b.mirror.normal()).norm() < 1e-9);
    }

    #[test]
    fn single_precision_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let k = test_k();
        let m = random_front_mirror(&mut rng);
        let pairs: Vec<Correspondence<f32>> = synthetic_pairs(&mut rng, &k, &m, 60)
            .into_iter()
            .map(|p| Correspondence {
                real: p.real.cast(),
                mirror: p.mirror.cast(),
                frame: p.frame,
                joint: p.joint,
            })
            .collect();
        let est = estimate_mirror(&CorrespondenceSet::new(pairs).unwrap(), &k.cast()).unwrap();
        let n = est.mirror.normal().cast::<f64>();
        assert!((n - m.normal()).norm() < 1e-3);
    }
}
