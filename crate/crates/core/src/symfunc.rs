use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{domain, Error, Result};

pub const SYM_TOL: f64 = 1e-10;

/// base^exp with integer exponents via powi; otherwise the base must be positive (a vanishing base with exp > 0 gives 0).
pub fn safe_pow(base: f64, exp: f64) -> Result<f64> {
    if exp.fract() == 0.0 && exp.abs() < i32::MAX as f64 {
        return Ok(base.powi(exp as i32));
    }
    if base > 1e-12 {
        Ok(base.powf(exp))
    } else if base.abs() <= 1e-12 && exp > 0.0 {
        Ok(0.0)
    } else {
        domain(format!("{base}^{exp} is not real"))
    }
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricSpectrum {
    eigs: Vec<f64>,
}

impl SymmetricSpectrum {
    pub fn new(mut eigs: Vec<f64>) -> Result<Self> {
        if eigs.is_empty() {
            return domain("empty eigenvalue list");
        }
        if eigs.iter().any(|e| !e.is_finite()) {
            return domain("non-finite eigenvalue");
        }
        eigs.sort_by(|a, b| a.total_cmp(b));
        Ok(Self { eigs })
    }

    pub fn from_matrix(a: &DMatrix<f64>) -> Result<Self> {
        check_symmetric(a)?;
        Self::new(sym_eigenvalues(a))
    }

    pub fn eigs(&self) -> &[f64] {
        &self.eigs
    }

    pub fn s(&self) -> usize {
        self.eigs.len()
    }

    /// σ_0..σ_s as coefficients of ∏(1 + t k_i).
    pub fn elementary_symmetric(&self) -> Vec<f64> {
        let mut c = vec![0.0; self.s() + 1];
        c[0] = 1.0;
        for (m, &k) in self.eigs.iter().enumerate() {
            for r in (1..=m + 1).rev() {
                c[r] += k * c[r - 1];
            }
        }
        c
    }

    /// τ_1..τ_max_i.
    pub fn power_sums(&self, max_i: usize) -> Result<Vec<f64>> {
        if max_i < 1 {
            return domain("power sums need max_i >= 1");
        }
        Ok((1..=max_i)
            .map(|i| self.eigs.iter().map(|k| k.powi(i as i32)).sum())
            .collect())
    }

    /// Normalized S_0..S_s with S_r = σ_r / C(s, r).
    pub fn normalized(&self) -> Vec<f64> {
        let s = self.s();
        self.elementary_symmetric()
            .iter()
            .enumerate()
            .map(|(r, v)| v / binomial(s, r))
            .collect()
    }

    pub fn q_r(&self, r: usize) -> Result<f64> {
        let s = self.s();
        if r < 1 || r > s {
            return domain(format!("Q_r needs 1 <= r <= s, got r={r}, s={s}"));
        }
        let sn = self.normalized();
        let mut q = 0.0;
        for j in 0..=r {
            let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
            q += sign * binomial(r, j) * sn[1].powi((r - j) as i32) * sn[j];
        }
        Ok(q)
    }
}

/// σ_0..σ_r from τ_1..τ_r via Newton's identities.
pub fn sigma_from_power_sums(tau: &[f64]) -> Vec<f64> {
    let mut sigma = vec![1.0];
    for k in 1..=tau.len() {
        let mut acc = 0.0;
        for i in 1..=k {
            let sign = if i % 2 == 1 { 1.0 } else { -1.0 };
            acc += sign * sigma[k - i] * tau[i - 1];
        }
        sigma.push(acc / k as f64);
    }
    sigma
}

pub fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Validation(format!(
            "matrix is {}x{}, expected square",
            a.nrows(),
            a.ncols()
        )));
    }
    let scale = a.amax().max(1.0);
    let asym = (a - a.transpose()).amax();
    if asym > SYM_TOL * scale {
        return Err(Error::Validation(format!("matrix asymmetric by {asym:e}")));
    }
    Ok(())
}

/// Ascending eigenvalues of a symmetric matrix.
pub fn sym_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    if a.nrows() == 0 {
        return Vec::new();
    }
    let sym = (a + a.transpose()) * 0.5;
    let mut e: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    e.sort_by(|x, y| x.total_cmp(y));
    e
}

#[derive(Debug, Clone, PartialEq)]
pub struct NewtonOperator {
    pub matrix: DMatrix<f64>,
    pub r: usize,
}

/// T_r(A) = Σ_j (−1)^j σ_{r−j} A^j.
pub fn newton_transform(a: &DMatrix<f64>, r: usize) -> Result<NewtonOperator> {
    check_symmetric(a)?;
    let s = a.nrows();
    if r > s {
        return domain(format!("Newton transform order r={r} exceeds s={s}"));
    }
    let sigma = SymmetricSpectrum::new(sym_eigenvalues(a))?.elementary_symmetric();
    Ok(NewtonOperator {
        matrix: newton_explicit(a, &sigma, r),
        r,
    })
}

pub(crate) fn newton_explicit(a: &DMatrix<f64>, sigma: &[f64], r: usize) -> DMatrix<f64> {
    let s = a.nrows();
    let mut t = DMatrix::zeros(s, s);
    let mut pow = DMatrix::identity(s, s);
    for j in 0..=r {
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        t += &pow * (sign * sigma[r - j]);
        pow = &pow * a;
    }
    t
}

/// T_r via T_r = σ_r id − A T_{r−1}.
pub fn newton_transform_inductive(a: &DMatrix<f64>, r: usize) -> Result<NewtonOperator> {
    check_symmetric(a)?;
    let s = a.nrows();
    if r > s {
        return domain(format!("Newton transform order r={r} exceeds s={s}"));
    }
    let sigma = SymmetricSpectrum::new(sym_eigenvalues(a))?.elementary_symmetric();
    let mut t = DMatrix::identity(s, s);
    for k in 1..=r {
        t = DMatrix::identity(s, s) * sigma[k] - a * t;
    }
    Ok(NewtonOperator { matrix: t, r })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TracelessPart {
    pub matrix: DMatrix<f64>,
}

impl TracelessPart {
    /// B = H id − A with H = tr A / s.
    pub fn from_shape_operator(a: &DMatrix<f64>) -> Result<Self> {
        check_symmetric(a)?;
        let s = a.nrows();
        if s == 0 {
            return domain("empty shape operator");
        }
        let h = a.trace() / s as f64;
        Ok(Self {
            matrix: DMatrix::identity(s, s) * h - a,
        })
    }

    pub fn spectrum(&self) -> Result<SymmetricSpectrum> {
        SymmetricSpectrum::new(sym_eigenvalues(&self.matrix))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn safe_pow_rules() {
        assert_eq!(safe_pow(-2.0, 3.0).unwrap(), -8.0);
        assert_eq!(safe_pow(0.0, 1.5).unwrap(), 0.0);
        assert!((safe_pow(4.0, 1.5).unwrap() - 8.0).abs() < 1e-15);
        assert!(safe_pow(-1.0, 0.5).is_err());
        assert!(safe_pow(0.0, -0.5).is_err());
    }
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn spec(v: &[f64]) -> SymmetricSpectrum {
        SymmetricSpectrum::new(v.to_vec()).unwrap()
    }

    fn random_sym(s: usize, seed: &[f64]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(s, s);
        let mut k = 0;
        for i in 0..s {
            for j in i..s {
                m[(i, j)] = seed[k % seed.len()] * (1.0 + 0.37 * k as f64).sin();
                m[(j, i)] = m[(i, j)];
                k += 1;
            }
        }
        m
    }

    #[test]
    fn sigma_of_zero_spectrum() {
        assert_eq!(spec(&[0.0, 0.0, 0.0]).elementary_symmetric(), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sigma_of_one_two_three() {
        assert_eq!(spec(&[3.0, 1.0, 2.0]).elementary_symmetric(), vec![1.0, 6.0, 11.0, 6.0]);
    }

    #[test]
    fn sigma_two_from_power_sums_double_eigenvalue() {
        let c = 1.7;
        let sp = spec(&[c, c]);
        let sigma = sp.elementary_symmetric();
        let tau = sp.power_sums(2).unwrap();
        assert_relative_eq!(tau[0], 2.0 * c, epsilon = 1e-15);
        assert_relative_eq!(tau[1], 2.0 * c * c, epsilon = 1e-15);
        assert_relative_eq!(2.0 * sigma[2], tau[0] * tau[0] - tau[1], epsilon = 1e-12);
    }

    #[test]
    fn empty_spectrum_rejected() {
        assert!(matches!(SymmetricSpectrum::new(vec![]), Err(Error::Domain(_))));
    }

    #[test]
    fn power_sums_examples() {
        assert_eq!(spec(&[1.0, 2.0, 3.0]).power_sums(3).unwrap(), vec![6.0, 14.0, 36.0]);
        assert_eq!(spec(&[1.0; 4]).power_sums(5).unwrap(), vec![4.0; 5]);
        assert_eq!(spec(&[-2.0]).power_sums(3).unwrap(), vec![-2.0, 4.0, -8.0]);
        assert!(spec(&[1.0]).power_sums(0).is_err());
    }

    #[test]
    fn newton_examples() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0]));
        assert_eq!(newton_transform(&a, 0).unwrap().matrix, DMatrix::identity(2, 2));
        let t1 = newton_transform(&a, 1).unwrap().matrix;
        assert_relative_eq!(t1, DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0])), epsilon = 1e-14);
        let b = random_sym(3, &[0.3, -1.2, 0.8, 2.1]);
        assert!(newton_transform(&b, 3).unwrap().matrix.amax() < 1e-12);
        assert!(matches!(newton_transform(&b, 4), Err(Error::Domain(_))));
        let mut c = b.clone();
        c[(0, 1)] += 1e-3;
        assert!(matches!(newton_transform(&c, 1), Err(Error::Validation(_))));
    }

    #[test]
    fn q_r_examples() {
        let sp = spec(&[0.3, -1.1, 2.0]);
        assert!(sp.q_r(1).unwrap().abs() < 1e-14);
        assert!(spec(&[0.7; 3]).q_r(3).unwrap().abs() < 1e-14);
        assert!(spec(&[0.7; 3]).q_r(2).unwrap().abs() < 1e-14);
        let (k1, k2) = (0.4, -1.3);
        assert_relative_eq!(spec(&[k1, k2]).q_r(2).unwrap(), (k1 - k2) * (k1 - k2) / 4.0, epsilon = 1e-14);
        assert!(sp.q_r(4).is_err());
        assert!(sp.q_r(0).is_err());
    }

    #[test]
    fn q2_closed_form_in_sigma() {
        let sp = spec(&[0.3, -1.1, 2.0, 0.25]);
        let s = 4.0;
        let sg = sp.elementary_symmetric();
        let q = ((s - 1.0) * sg[1] * sg[1] - 2.0 * s * sg[2]) / (s * s * (s - 1.0));
        assert_relative_eq!(sp.q_r(2).unwrap(), q, epsilon = 1e-13);
    }

    fn sym_strategy() -> impl Strategy<Value = DMatrix<f64>> {
        (1usize..=5).prop_flat_map(|s| {
            prop::collection::vec(-2.0f64..2.0, s * s).prop_map(move |v| {
                let m = DMatrix::from_vec(s, s, v);
                (&m + m.transpose()) * 0.5
            })
        })
    }

    proptest! {
        #[test]
        fn newton_trace_identities(a in sym_strategy()) {
            let s = a.nrows();
            let sigma = SymmetricSpectrum::from_matrix(&a).unwrap().elementary_symmetric();
            let sig = |k: usize| if k <= s { sigma[k] } else { 0.0 };
            let scale = 1.0 + a.amax().powi(s as i32 + 2);
            for r in 0..s {
                let t = newton_transform(&a, r).unwrap().matrix;
                let ti = newton_transform_inductive(&a, r).unwrap().matrix;
                prop_assert!((&t - &ti).amax() <= 1e-12 * scale);
                prop_assert!((t.trace() - (s - r) as f64 * sig(r)).abs() <= 1e-10 * scale);
                prop_assert!(((&a * &t).trace() - (r + 1) as f64 * sig(r + 1)).abs() <= 1e-10 * scale);
                let lhs = (&a * &a * &t).trace();
                let rhs = sig(1) * sig(r + 1) - (r + 2) as f64 * sig(r + 2);
                prop_assert!((lhs - rhs).abs() <= 1e-10 * scale);
            }
        }

        #[test]
        fn newton_identities_reconstruct_sigma(eigs in prop::collection::vec(-2.0f64..2.0, 1..=6)) {
            let sp = SymmetricSpectrum::new(eigs).unwrap();
            let s = sp.s();
            let tau = sp.power_sums(s).unwrap();
            let direct = sp.elementary_symmetric();
            let rec = sigma_from_power_sums(&tau);
            for r in 0..=s {
                prop_assert!((direct[r] - rec[r]).abs() <= 1e-12 * (1.0 + direct[r].abs()) * 2f64.powi(s as i32));
            }
            if s >= 2 {
                prop_assert!((2.0 * direct[2] - (tau[0] * tau[0] - tau[1])).abs() <= 1e-12 * (1.0 + tau[1]));
            }
        }

        #[test]
        fn q_r_scale_law(eigs in prop::collection::vec(-2.0f64..2.0, 2..=5), mu in 0.2f64..5.0) {
            let sp = SymmetricSpectrum::new(eigs.clone()).unwrap();
            let scaled = SymmetricSpectrum::new(eigs.iter().map(|k| k / mu).collect()).unwrap();
            for r in 1..=sp.s() {
                let q = sp.q_r(r).unwrap();
                let qc = scaled.q_r(r).unwrap();
                prop_assert!((qc * mu.powi(r as i32) - q).abs() <= 1e-10 * (1.0 + q.abs()));
            }
        }

        #[test]
        fn q_r_equals_minus_sigma_of_traceless_part(a in sym_strategy()) {
            let s = a.nrows();
            prop_assume!(s >= 2);
            let sp = SymmetricSpectrum::from_matrix(&a).unwrap();
            let b = TracelessPart::from_shape_operator(&a).unwrap();
            prop_assert!(b.matrix.trace().abs() < 1e-12 * (1.0 + a.amax()));
            let sb = b.spectrum().unwrap().elementary_symmetric();
            for r in 1..=s {
                let q = sp.q_r(r).unwrap();
                let alt = -sb[r] / binomial(s, r);
                prop_assert!((q - alt).abs() <= 1e-10 * (1.0 + a.amax().powi(r as i32)));
            }
        }
    }
}
