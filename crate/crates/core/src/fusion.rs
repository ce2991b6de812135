//! Gated fusion of text and retrieved-image representations.
//!
//! Per token `i` with retrieved images `M_i` (masked slots excluded):
//!
//! ```text
//! M̄_i[j] = M_i[j] W + b
//! α_i    = softmax_j( h_i · M̄_i[j] / √d )
//! h̄_i    = Σ_j α_ij M̄_i[j]
//! λ_i    = σ( g · [h_i ; h̄_i] + g₀ )
//! 𝓗_i    = (1 − λ_i) h_i + λ_i h̄_i
//! ```
//!
//! Tokens without any image keep `𝓗_i = h_i` exactly (λ forced to 0).

use ndarray::{s, Array1, Array2, Array3, ArrayView2};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::features::ImageTensor;
use crate::nn::{push_mut, push_ref, uniform1, Linear, ParamMut, ParamRef, Parameterized};
use crate::real::{c, Real};

/// Initial gate bias; σ(−2) ≈ 0.12 keeps early training close to text-only.
pub const GATE_BIAS_INIT: f64 = -2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams<T> {
    /// `d_img × d_model` projection.
    pub projection: Linear<T>,
    /// Length `2 · d_model`: first half weighs `h_i`, second half `h̄_i`.
    pub gate_weight: Array1<T>,
    /// Single-element bias.
    pub gate_bias: Array1<T>,
}

impl<T: Real> FusionParams<T> {
    pub fn init(rng: &mut ChaCha8Rng, d_img: usize, d_model: usize) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        Self {
            projection: Linear::init(rng, d_img, d_model, bound),
            gate_weight: uniform1(rng, 2 * d_model, bound),
            gate_bias: Array1::from_elem(1, c(GATE_BIAS_INIT)),
        }
    }

    pub fn zeros(d_img: usize, d_model: usize) -> Self {
        Self {
            projection: Linear::zeros(d_img, d_model),
            gate_weight: Array1::zeros(2 * d_model),
            gate_bias: Array1::zeros(1),
        }
    }

    pub fn d_img(&self) -> usize {
        self.projection.weight.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.projection.weight.ncols()
    }

    pub fn cast<U: Real>(&self) -> FusionParams<U> {
        let f = |v: &T| U::from_f64_lossy(v.to_f64_lossy());
        FusionParams {
            projection: Linear {
                weight: self.projection.weight.map(f),
                bias: self.projection.bias.map(f),
            },
            gate_weight: self.gate_weight.map(f),
            gate_bias: self.gate_bias.map(f),
        }
    }
}

impl<T: Real> Parameterized<T> for FusionParams<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, T>>) {
        self.projection.visit(&format!("{prefix}projection."), out);
        push_ref(out, prefix, "gate_weight", &self.gate_weight);
        push_ref(out, prefix, "gate_bias", &self.gate_bias);
    }
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        self.projection.visit_mut(&format!("{prefix}projection."), out);
        push_mut(out, prefix, "gate_weight", &mut self.gate_weight);
        push_mut(out, prefix, "gate_bias", &mut self.gate_bias);
    }
}

/// Affine projection of every valid slot; masked slots stay zero.
pub fn project<T: Real>(params: &FusionParams<T>, images: &ImageTensor<T>) -> Result<Array3<T>> {
    let (n, m, d_img) = images.values.dim();
    if d_img != params.d_img() {
        return Err(Error::Dimension(format!(
            "image features have width {d_img}, projection expects {}",
            params.d_img()
        )));
    }
    let d = params.d_model();
    let mut out = Array3::zeros((n, m, d));
    for i in 0..n {
        let projected = params.projection.forward(images.values.slice(s![i, .., ..]));
        for j in 0..m {
            if images.mask[[i, j]] {
                out.slice_mut(s![i, j, ..]).assign(&projected.row(j));
            }
        }
    }
    Ok(out)
}

/// Output of the per-token image attention.
#[derive(Debug, Clone)]
pub struct Attended<T> {
    /// `n × d_model` text-conditioned image representation.
    pub hbar: Array2<T>,
    /// `n × m` attention weights; masked slots are exactly zero.
    pub weights: Array2<T>,
    /// Tokens with no valid image slot.
    pub no_image: Vec<bool>,
}

pub fn attend<T: Real>(h: ArrayView2<'_, T>, projected: &Array3<T>, mask: &Array2<bool>) -> Result<Attended<T>> {
    let (n, m, d) = projected.dim();
    if h.dim() != (n, d) || mask.dim() != (n, m) {
        return Err(Error::Dimension(format!(
            "text {:?}, projected images {:?}, mask {:?}",
            h.dim(),
            projected.dim(),
            mask.dim()
        )));
    }
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let mut hbar = Array2::zeros((n, d));
    let mut weights = Array2::zeros((n, m));
    let mut no_image = vec![false; n];
    for i in 0..n {
        let hi = h.row(i);
        let mut max = T::neg_infinity();
        let mut scores = vec![T::zero(); m];
        for j in 0..m {
            if mask[[i, j]] {
                scores[j] = hi.dot(&projected.slice(s![i, j, ..])) * scale;
                max = max.max(scores[j]);
            }
        }
        if max == T::neg_infinity() {
            no_image[i] = true;
            continue;
        }
        let mut sum = T::zero();
        for j in 0..m {
            if mask[[i, j]] {
                scores[j] = (scores[j] - max).exp();
                sum += scores[j];
            }
        }
        for j in 0..m {
            if mask[[i, j]] {
                let w = scores[j] / sum;
                weights[[i, j]] = w;
                hbar.row_mut(i).scaled_add(w, &projected.slice(s![i, j, ..]));
            }
        }
    }
    Ok(Attended { hbar, weights, no_image })
}

#[inline]
fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// Returns the fused representation and the per-token gate values.
pub fn gate_fuse<T: Real>(
    h: ArrayView2<'_, T>,
    hbar: ArrayView2<'_, T>,
    params: &FusionParams<T>,
    no_image: &[bool],
) -> Result<(Array2<T>, Array1<T>)> {
    if h.dim() != hbar.dim() || h.nrows() != no_image.len() {
        return Err(Error::Dimension(format!(
            "text {:?}, image {:?}, flags {}",
            h.dim(),
            hbar.dim(),
            no_image.len()
        )));
    }
    let d = h.ncols();
    if params.gate_weight.len() != 2 * d {
        return Err(Error::Dimension(format!(
            "gate weight has {} entries, expected {}",
            params.gate_weight.len(),
            2 * d
        )));
    }
    let (gh, gb) = params.gate_weight.view().split_at(ndarray::Axis(0), d);
    let mut fused = h.to_owned();
    let mut lambdas = Array1::zeros(h.nrows());
    for i in 0..h.nrows() {
        if no_image[i] {
            continue;
        }
        let z = gh.dot(&h.row(i)) + gb.dot(&hbar.row(i)) + params.gate_bias[0];
        let lambda = sigmoid(z);
        lambdas[i] = lambda;
        let one_minus = T::one() - lambda;
        for (f, (&a, &b)) in fused.row_mut(i).iter_mut().zip(h.row(i).iter().zip(hbar.row(i).iter())) {
            *f = one_minus * a + lambda * b;
        }
    }
    Ok((fused, lambdas))
}

pub struct FusionCache<T> {
    h: Array2<T>,
    images: ImageTensor<T>,
    projected: Array3<T>,
    pub attended: Attended<T>,
    pub lambdas: Array1<T>,
}

/// Gradients of a scalar loss with respect to every fusion input.
pub struct FusionGrads<T> {
    pub h: Array2<T>,
    pub images: Array3<T>,
    pub params: FusionParams<T>,
}

pub fn fusion_forward<T: Real>(
    params: &FusionParams<T>,
    h: ArrayView2<'_, T>,
    images: &ImageTensor<T>,
) -> Result<(Array2<T>, FusionCache<T>)> {
    if images.n_tokens() != h.nrows() {
        return Err(Error::Dimension(format!(
            "{} text positions but {} image rows",
            h.nrows(),
            images.n_tokens()
        )));
    }
    let projected = project(params, images)?;
    let attended = attend(h, &projected, &images.mask)?;
    let (fused, lambdas) = gate_fuse(h, attended.hbar.view(), params, &attended.no_image)?;
    let cache = FusionCache {
        h: h.to_owned(),
        images: images.clone(),
        projected,
        attended,
        lambdas,
    };
    Ok((fused, cache))
}

/// Accumulates parameter gradients into `grad` and returns input gradients.
pub fn fusion_backward<T: Real>(
    params: &FusionParams<T>,
    cache: &FusionCache<T>,
    dfused: ArrayView2<'_, T>,
    grad: &mut FusionParams<T>,
) -> (Array2<T>, Array3<T>) {
    let (n, m, d) = cache.projected.dim();
    let scale = T::one() / T::from_usize(d).unwrap().sqrt();
    let (gh, gb) = params.gate_weight.view().split_at(ndarray::Axis(0), d);
    let mut dh = dfused.to_owned();
    let mut dprojected = Array3::<T>::zeros((n, m, d));
    let hbar = &cache.attended.hbar;
    for i in 0..n {
        if cache.attended.no_image[i] {
            continue;
        }
        let lambda = cache.lambdas[i];
        let dout = dfused.row(i);
        let hi = cache.h.row(i);
        let hbi = hbar.row(i);
        // 𝓗 = (1−λ)h + λh̄
        let dlambda: T = dout.iter().zip(hi.iter().zip(hbi.iter())).map(|(&g, (&a, &b))| g * (b - a)).sum();
        let dz = dlambda * lambda * (T::one() - lambda);
        let mut dh_i: Array1<T> = dout.mapv(|g| g * (T::one() - lambda));
        let mut dhbar_i: Array1<T> = dout.mapv(|g| g * lambda);
        {
            let (mut g_h, mut g_b) = grad.gate_weight.view_mut().split_at(ndarray::Axis(0), d);
            g_h.scaled_add(dz, &hi);
            g_b.scaled_add(dz, &hbi);
        }
        grad.gate_bias[0] += dz;
        dh_i.scaled_add(dz, &gh);
        dhbar_i.scaled_add(dz, &gb);
        // h̄ = Σ α_j M̄_j
        let weights = cache.attended.weights.row(i);
        let mut dalpha = vec![T::zero(); m];
        for j in 0..m {
            if cache.images.mask[[i, j]] {
                let mj = cache.projected.slice(s![i, j, ..]);
                dalpha[j] = dhbar_i.dot(&mj);
                dprojected.slice_mut(s![i, j, ..]).scaled_add(weights[j], &dhbar_i);
            }
        }
        let dot: T = (0..m).map(|j| weights[j] * dalpha[j]).sum();
        for j in 0..m {
            if cache.images.mask[[i, j]] {
                let dscore = weights[j] * (dalpha[j] - dot) * scale;
                let mj = cache.projected.slice(s![i, j, ..]).to_owned();
                dh_i.scaled_add(dscore, &mj);
                dprojected.slice_mut(s![i, j, ..]).scaled_add(dscore, &hi);
            }
        }
        dh.row_mut(i).assign(&dh_i);
    }
    // M̄ = M W + b on valid slots only
    let mut dimages = Array3::<T>::zeros(cache.images.values.raw_dim());
    for i in 0..n {
        if cache.attended.no_image[i] {
            continue;
        }
        let valid: Vec<usize> = (0..m).filter(|&j| cache.images.mask[[i, j]]).collect();
        let rows = |a: &Array3<T>, w: usize| {
            let mut out = Array2::zeros((valid.len(), w));
            for (r, &j) in valid.iter().enumerate() {
                out.row_mut(r).assign(&a.slice(s![i, j, ..]));
            }
            out
        };
        let x = rows(&cache.images.values, cache.images.dim());
        let dy = rows(&dprojected, d);
        let dx = params.projection.backward(x.view(), dy.view(), &mut grad.projection);
        for (r, &j) in valid.iter().enumerate() {
            dimages.slice_mut(s![i, j, ..]).assign(&dx.row(r));
        }
    }
    (dh, dimages)
}

/// Convenience wrapper that allocates fresh parameter gradients.
pub fn fusion_gradients<T: Real>(
    params: &FusionParams<T>,
    cache: &FusionCache<T>,
    dfused: ArrayView2<'_, T>,
) -> FusionGrads<T> {
    let mut grad = FusionParams::zeros(params.d_img(), params.d_model());
    let (h, images) = fusion_backward(params, cache, dfused, &mut grad);
    FusionGrads { h, images, params: grad }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn tensor(values: Array3<f64>, mask: Array2<bool>) -> ImageTensor<f64> {
        ImageTensor { values, mask }
    }

    fn identity_params(d: usize) -> FusionParams<f64> {
        let mut p = FusionParams::zeros(d, d);
        p.projection.weight = Array2::eye(d);
        p
    }

    #[test]
    fn zero_projection_gives_zero() {
        let p = FusionParams::<f64>::zeros(3, 2);
        let t = tensor(Array3::from_elem((2, 2, 3), 1.5), Array2::from_elem((2, 2), true));
        assert!(project(&p, &t).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_projection_copies_valid_slots() {
        let values = Array3::from_shape_fn((1, 2, 3), |(_, j, k)| (j * 3 + k) as f64 + 0.5);
        let mut p = identity_params(3);
        p.projection.bias = array![1.0, 1.0, 1.0];
        let t = tensor(values.clone(), array![[true, false]]);
        let out = project(&p, &t).unwrap();
        assert_eq!(out.slice(s![0, 0, ..]), values.slice(s![0, 0, ..]).mapv(|v| v + 1.0));
        // bias excluded on masked slots
        assert!(out.slice(s![0, 1, ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_matches_matrix_product() {
        // 1×2×3 input, 3×2 weight; expected values by hand: x·W + b
        let values = array![[[0.3, -1.2, 2.0], [1.1, 0.4, -0.7]]];
        let w = array![[0.5, -0.25], [1.5, 0.75], [-1.0, 2.0]];
        let b = array![0.1, -0.2];
        let p = FusionParams {
            projection: Linear { weight: w, bias: b },
            gate_weight: Array1::zeros(4),
            gate_bias: Array1::zeros(1),
        };
        let out = project(&p, &tensor(values, array![[true, true]])).unwrap();
        let expected = [
            [0.3 * 0.5 - 1.2 * 1.5 - 2.0 + 0.1, -0.3 * 0.25 - 1.2 * 0.75 + 4.0 - 0.2],
            [1.1 * 0.5 + 0.4 * 1.5 + 0.7 + 0.1, -1.1 * 0.25 + 0.4 * 0.75 - 1.4 - 0.2],
        ];
        for j in 0..2 {
            for k in 0..2 {
                assert!((out[[0, j, k]] - expected[j][k]).abs() < 1e-12);
            }
        }
        let bad = tensor(Array3::zeros((1, 1, 5)), array![[true]]);
        assert!(matches!(project(&p, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn attend_single_image_returns_it() {
        let proj = array![[[0.7, -3.0]]];
        let a = attend(array![[5.0, 1.0]].view(), &proj, &array![[true]]).unwrap();
        assert_eq!(a.hbar.row(0).to_vec(), vec![0.7, -3.0]);
        assert_eq!(a.weights[[0, 0]], 1.0);
    }

    #[test]
    fn attend_identical_keys_gives_that_vector() {
        let proj = Array3::from_shape_fn((1, 3, 2), |(_, _, k)| [0.25f64, -1.5][k]);
        let a = attend(array![[2.0, 9.0]].view(), &proj, &array![[true, true, true]]).unwrap();
        assert!((a.hbar[[0, 0]] - 0.25).abs() < 1e-15);
        assert!((a.hbar[[0, 1]] + 1.5).abs() < 1e-15);
    }

    #[test]
    fn attend_two_slot_example() {
        // weights = softmax([1/√2, 0]) computed independently:
        // e^{0.70710678} / (e^{0.70710678} + 1) = 0.6697615...
        let proj = array![[[1.0f64, 0.0], [0.0, 1.0]]];
        let a = attend(array![[1.0, 0.0]].view(), &proj, &array![[true, true]]).unwrap();
        let w0 = 0.669_761_5;
        assert!((a.weights[[0, 0]] - w0).abs() < 1e-6);
        assert!((a.weights[[0, 1]] - (1.0 - w0)).abs() < 1e-6);
        assert!((a.hbar[[0, 0]] - 0.6698).abs() < 1e-4);
        assert!((a.hbar[[0, 1]] - 0.3302).abs() < 1e-4);
    }

    #[test]
    fn masked_slots_ignored() {
        let proj = array![[[1.0, 0.0], [100.0, 100.0]]];
        let a = attend(array![[1.0, 1.0]].view(), &proj, &array![[true, false]]).unwrap();
        assert_eq!(a.weights.row(0).to_vec(), vec![1.0, 0.0]);
        let none = attend(array![[1.0, 1.0]].view(), &proj, &array![[false, false]]).unwrap();
        assert!(none.no_image[0]);
        assert!(none.hbar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gate_averages() {
        let p = FusionParams::<f64>::zeros(2, 2);
        let h = array![[1.0, 3.0]];
        let hb = array![[3.0, -1.0]];
        let (f, l) = gate_fuse(h.view(), hb.view(), &p, &[false]).unwrap();
        assert_eq!(l[0], 0.5);
        assert_eq!(f.row(0).to_vec(), vec![2.0, 1.0]);
    }

    #[test]
    fn no_image_flags_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FusionParams::<f64>::init(&mut rng, 2, 2);
        let h = array![[0.1, -0.3], [7.0, 2.0]];
        let hb = array![[5.0, 5.0], [1.0, 1.0]];
        let (f, l) = gate_fuse(h.view(), hb.view(), &p, &[true, true]).unwrap();
        assert_eq!(f, h);
        assert!(l.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gate_matches_direct_formula() {
        // d_model = 3; λ = σ(g·[h; h̄] + g₀), 𝓗 = (1−λ)h + λh̄, evaluated by hand
        let mut p = FusionParams::<f64>::zeros(3, 3);
        p.gate_weight = array![0.2, -0.4, 0.1, 0.3, 0.05, -0.6];
        p.gate_bias = array![0.15];
        let h = array![[0.5, -1.0, 2.0]];
        let hb = array![[1.5, 0.25, -0.75]];
        let z: f64 = 0.2 * 0.5 + 0.4 * 1.0 + 0.1 * 2.0 + 0.3 * 1.5 + 0.05 * 0.25 + 0.6 * 0.75 + 0.15;
        let lambda = 1.0 / (1.0 + (-z).exp());
        let (f, l) = gate_fuse(h.view(), hb.view(), &p, &[false]).unwrap();
        assert!((l[0] - lambda).abs() < 1e-14);
        for k in 0..3 {
            let want = (1.0 - lambda) * h[[0, k]] + lambda * hb[[0, k]];
            assert!((f[[0, k]] - want).abs() < 1e-14);
        }
    }

    #[test]
    fn all_masked_is_identity_with_zero_image_grad() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FusionParams::<f64>::init(&mut rng, 4, 3);
        let h = array![[0.1, 0.2, 0.3], [-1.0, 0.0, 1.0]];
        let t = tensor(Array3::from_elem((2, 2, 4), 0.5), Array2::from_elem((2, 2), false));
        let (f, cache) = fusion_forward(&p, h.view(), &t).unwrap();
        assert_eq!(f, h);
        let g = fusion_gradients(&p, &cache, Array2::ones((2, 3)).view());
        assert!(g.images.iter().all(|&v| v == 0.0));
        assert_eq!(g.h, Array2::<f64>::ones((2, 3)));
    }

    #[test]
    fn zero_images_with_zero_bias_give_zero_hbar() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = FusionParams::<f64>::init(&mut rng, 4, 3);
        p.projection.bias.fill(0.0);
        let h = array![[0.4, -0.2, 0.9]];
        let t = tensor(Array3::zeros((1, 2, 4)), Array2::from_elem((1, 2), true));
        let (f, cache) = fusion_forward(&p, h.view(), &t).unwrap();
        assert!(cache.attended.hbar.iter().all(|&v| v == 0.0));
        let z = p.gate_weight.slice(s![..3]).dot(&h.row(0)) + p.gate_bias[0];
        let lambda = 1.0 / (1.0 + (-z).exp());
        for k in 0..3 {
            assert!((f[[0, k]] - (1.0 - lambda) * h[[0, k]]).abs() < 1e-14);
        }
    }
}
