//! Guarded singular value decomposition.
//!
//! nalgebra's bidiagonal QR occasionally returns factors that do not
//! reproduce the input when a singular value is exactly zero in floating
//! point. Every factorization is checked and retried on the transpose.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub(crate) struct Svd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

fn attempt(m: &DMatrix<f64>) -> Option<Svd> {
    let svd = m.clone().svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let sigma = svd.singular_values;
    let recon = &u * DMatrix::from_diagonal(&sigma) * &v_t;
    let tol = 1e-11 * (m.nrows().max(m.ncols()) as f64) * m.amax().max(f64::MIN_POSITIVE);
    ((recon - m).amax() <= tol).then_some(Svd { u, sigma, v_t })
}

pub(crate) fn checked_svd(m: &DMatrix<f64>) -> Result<Svd> {
    if let Some(s) = attempt(m) {
        return Ok(s);
    }
    if let Some(s) = attempt(&m.transpose()) {
        return Ok(Svd {
            u: s.v_t.transpose(),
            sigma: s.sigma,
            v_t: s.u.transpose(),
        });
    }
    Err(Error::NoConvergence {
        what: "singular value decomposition failed its reconstruction check".into(),
        last_increment: f64::NAN,
        at_time: f64::NAN,
    })
}

pub(crate) fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    checked_svd(m).map(|s| s.sigma)
}
