//! Joint Kalman filter and RTS smoother over all `n + 1` replicas.

use nalgebra::{DMatrix, DVector};

use super::{
    check_conditioning_inputs, discretize, output_scale, robust_cholesky, warn_outside, CoupledSystem,
    EmulatorPrediction, OBSERVATION_JITTER,
};
use crate::design::{DesignSet, ParameterVector};
use crate::error::{Error, Result};
use crate::prior_model::{AuxiliaryParameters, LinearPriorModel};

/// Solve `a x = b` for symmetric positive semi-definite `a`, falling back to a
/// pseudo-inverse when `a` is singular (duplicated replicas).
fn psd_solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = a.clone().cholesky() {
        return ch.solve(b);
    }
    let eig = a.clone().symmetric_eigen();
    let cutoff = eig.eigenvalues.amax() * 1e-13;
    let inv = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&l| if l > cutoff { 1.0 / l } else { 0.0 }),
    );
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose() * b
}

fn symmetrize(p: &mut DMatrix<f64>) {
    let m = p.nrows();
    for i in 0..m {
        for j in 0..i {
            let v = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = v;
        }
    }
}

fn check_psd(p: &DMatrix<f64>, step: usize) -> Result<()> {
    let scale = p.diagonal().amax().max(f64::MIN_POSITIVE);
    if let Some(i) = (0..p.nrows()).find(|&i| p[(i, i)] < -1e-8 * scale) {
        return Err(Error::numerical(format!(
            "filter covariance lost positive semi-definiteness at step {step} (diagonal {i} = {:e})",
            p[(i, i)]
        )));
    }
    Ok(())
}

/// Condition the query replica at `theta` on the design outputs.
///
/// The design outputs are observed through the replica gains with a jitter of
/// [`OBSERVATION_JITTER`] times the squared output scale.
pub fn condition(
    design: &DesignSet,
    model: &LinearPriorModel,
    aux: &AuxiliaryParameters,
    theta: &[f64],
) -> Result<EmulatorPrediction> {
    check_conditioning_inputs(design, model, aux)?;
    warn_outside(design, theta);
    if aux.sigma == 0.0 {
        let mean = model.simulate(theta, aux)?;
        let n = mean.len();
        return Ok(EmulatorPrediction::new(mean, vec![0.0; n]));
    }
    let mut thetas: Vec<ParameterVector> = design.points().to_vec();
    thetas.push(theta.to_vec());
    let system = CoupledSystem::from_model(model, aux, &thetas, &design.space().spans())?;
    let disc = discretize(&system)?;

    let n = design.len();
    let m = n + 1;
    let nt = model.len();
    let scale = output_scale(design);
    let jitter = OBSERVATION_JITTER * scale * scale;

    let phi = DVector::from_vec(disc.transitions.clone());
    let drive = DVector::from_vec(disc.drives.clone());
    let mut h = DMatrix::zeros(n, m);
    for a in 0..n {
        h[(a, a)] = system.gains[a];
    }
    let mut obs = DVector::zeros(n);

    let mut means_pred = Vec::with_capacity(nt);
    let mut covs_pred = Vec::with_capacity(nt);
    let mut means = Vec::with_capacity(nt);
    let mut covs: Vec<DMatrix<f64>> = Vec::with_capacity(nt);

    let mut mean = DVector::zeros(m);
    let mut cov = DMatrix::zeros(m, m);
    for i in 0..nt {
        let u = system.input[i];
        let m_pred = mean.component_mul(&phi) + &drive * u;
        let mut p_pred = DMatrix::from_fn(m, m, |a, b| phi[a] * cov[(a, b)] * phi[b]) + &disc.noise;
        symmetrize(&mut p_pred);

        for (a, out) in design.outputs().iter().enumerate() {
            obs[a] = out.values()[i];
        }
        let ph = &p_pred * h.transpose();
        let mut s = &h * &ph;
        for a in 0..n {
            s[(a, a)] += jitter;
        }
        let s_chol = robust_cholesky(s, "innovation covariance")?;
        let gain = s_chol.solve(&ph.transpose()).transpose();
        let innovation = &obs - &h * &m_pred;
        mean = &m_pred + &gain * innovation;

        // Joseph form keeps the update symmetric positive semi-definite
        let a_mat = DMatrix::identity(m, m) - &gain * &h;
        cov = &a_mat * &p_pred * a_mat.transpose() + &gain * gain.transpose() * jitter;
        symmetrize(&mut cov);
        check_psd(&cov, i)?;

        means_pred.push(m_pred);
        covs_pred.push(p_pred);
        means.push(mean.clone());
        covs.push(cov.clone());
    }

    // Rauch-Tung-Striebel backward pass
    let mut sm_mean = means[nt - 1].clone();
    let mut sm_cov = covs[nt - 1].clone();
    let q = n;
    let hq = system.gains[q];
    let mut out_mean = vec![0.0; nt];
    let mut out_var = vec![0.0; nt];
    out_mean[nt - 1] = hq * sm_mean[q];
    out_var[nt - 1] = hq * hq * sm_cov[(q, q)].max(0.0);
    for i in (0..nt - 1).rev() {
        let pf_phi = DMatrix::from_fn(m, m, |a, b| covs[i][(a, b)] * phi[b]);
        let smoother_gain = psd_solve(&covs_pred[i + 1], &pf_phi.transpose()).transpose();
        sm_mean = &means[i] + &smoother_gain * (&sm_mean - &means_pred[i + 1]);
        sm_cov = &covs[i] + &smoother_gain * (&sm_cov - &covs_pred[i + 1]) * smoother_gain.transpose();
        symmetrize(&mut sm_cov);
        check_psd(&sm_cov, i)?;
        out_mean[i] = hq * sm_mean[q];
        out_var[i] = hq * hq * sm_cov[(q, q)].max(0.0);
    }
    Ok(EmulatorPrediction::new(model.rain().with_values(out_mean)?, out_var))
}
