//! Material constants, nondimensionalization, contact boundary values,
//! recombination and equilibrium initial guesses.
//!
//! Everything downstream of this module works in scaled (dimensionless)
//! quantities; [`ScalingBases`] is the single place where physical units
//! enter or leave.

use crate::error::ConfigError;
use serde::{Deserialize, Serialize};

/// Physical constants and silicon parameters in (cm, V, s) units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Elementary charge (C).
    pub q: f64,
    /// Boltzmann constant (J/K).
    pub k_b: f64,
    /// Temperature (K).
    pub temperature: f64,
    /// Thermal voltage kT/q (V).
    pub v_t: f64,
    /// Dielectric constant (C/(V cm)).
    pub eps: f64,
    /// Effective intrinsic carrier concentration (cm^-3).
    pub n_ie: f64,
    /// Electron mobility (cm^2/(V s)).
    pub mu_n: f64,
    /// Hole mobility (cm^2/(V s)).
    pub mu_p: f64,
    /// Electron diffusion coefficient (cm^2/s).
    pub d_n: f64,
    /// Hole diffusion coefficient (cm^2/s).
    pub d_p: f64,
    /// Electron lifetime (s).
    pub tau_n: f64,
    /// Hole lifetime (s).
    pub tau_p: f64,
    /// Electron Auger coefficient (cm^6/s).
    pub c_n: f64,
    /// Hole Auger coefficient (cm^6/s).
    pub c_p: f64,
}

impl MaterialParams {
    /// Average silicon constants at 300 K.
    ///
    /// The thermal voltage is computed as kT/q rather than stored rounded,
    /// so the Einstein relation D = mu kT/q holds to ~1e-10 relative.
    pub fn silicon_300k() -> Self {
        let q = 1.602_176_63e-19;
        let k_b = 1.380_648_52e-23;
        let temperature = 300.0;
        let v_t = k_b * temperature / q;
        Self {
            q,
            k_b,
            temperature,
            v_t,
            eps: 1.035_939_97e-12,
            n_ie: 1.087_381_84e10,
            mu_n: 1417.0,
            mu_p: 470.5,
            d_n: 36.632_271_05,
            d_p: 12.163_361_70,
            tau_n: 1e-3,
            tau_p: 3e-4,
            c_n: 6.598_418_20e-31,
            c_p: 4.150_587_41e-31,
        }
    }

    /// Checks positivity of every field and the Einstein relation for both
    /// carriers to 1e-9 relative.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let fields = [
            ("q", self.q),
            ("k_b", self.k_b),
            ("temperature", self.temperature),
            ("v_t", self.v_t),
            ("eps", self.eps),
            ("n_ie", self.n_ie),
            ("mu_n", self.mu_n),
            ("mu_p", self.mu_p),
            ("d_n", self.d_n),
            ("d_p", self.d_p),
            ("tau_n", self.tau_n),
            ("tau_p", self.tau_p),
            ("c_n", self.c_n),
            ("c_p", self.c_p),
        ];
        for (name, value) in fields {
            if !(value > 0.0) {
                return Err(ConfigError::NonPositive {
                    quantity: match name {
                        "q" => "q",
                        "k_b" => "k_b",
                        "temperature" => "temperature",
                        "v_t" => "v_t",
                        "eps" => "eps",
                        "n_ie" => "n_ie",
                        "mu_n" => "mu_n",
                        "mu_p" => "mu_p",
                        "d_n" => "d_n",
                        "d_p" => "d_p",
                        "tau_n" => "tau_n",
                        "tau_p" => "tau_p",
                        "c_n" => "c_n",
                        _ => "c_p",
                    },
                    value,
                });
            }
        }
        let einstein_n = (self.d_n - self.mu_n * self.v_t).abs() / self.d_n;
        let einstein_p = (self.d_p - self.mu_p * self.v_t).abs() / self.d_p;
        if einstein_n > 1e-9 || einstein_p > 1e-9 {
            return Err(ConfigError::Invalid {
                path: "material".into(),
                message: format!(
                    "Einstein relation violated: |D - mu V_T|/D = {einstein_n:.2e} (n), {einstein_p:.2e} (p)"
                ),
            });
        }
        Ok(())
    }
}

/// Scaling base units tying scaled quantities back to physical ones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingBases {
    /// Voltage base (V).
    pub v_star: f64,
    /// Concentration base (cm^-3).
    pub n_star: f64,
    /// Length base (cm).
    pub x_star: f64,
    /// Diffusivity base (cm^2/s).
    pub d_star: f64,
    /// Mobility base D*/V* (cm^2/(V s)).
    pub mu_star: f64,
    /// Time base x*^2/D* (s).
    pub t_star: f64,
    /// Current density base q D* N* / x* (A/cm^2).
    pub j_star: f64,
    /// Recombination rate base D* N* / x*^2 (cm^-3/s).
    pub r_star: f64,
    /// Auger coefficient base 1/(N*^2 t*) (cm^6/s).
    pub c_star: f64,
    /// Scaled Debye parameter eps V*/(q N* x*^2), dimensionless.
    pub lambda_sq: f64,
}

impl ScalingBases {
    /// Length base in micrometers.
    pub fn x_star_um(&self) -> f64 {
        self.x_star * 1e4
    }
}

/// Derives the dependent base units from the four independent ones.
///
/// `x_star` is in cm. Returns an error when any input is non-positive.
pub fn derive_scaling(
    material: &MaterialParams,
    n_star: f64,
    x_star: f64,
    v_star: f64,
    d_star: f64,
) -> Result<ScalingBases, ConfigError> {
    for (quantity, value) in [
        ("n_star", n_star),
        ("x_star", x_star),
        ("v_star", v_star),
        ("d_star", d_star),
    ] {
        if !(value > 0.0) {
            return Err(ConfigError::NonPositive { quantity, value });
        }
    }
    let mu_star = d_star / v_star;
    let t_star = x_star * x_star / d_star;
    let j_star = material.q * d_star * n_star / x_star;
    let r_star = d_star * n_star / (x_star * x_star);
    let c_star = 1.0 / (n_star * n_star * t_star);
    let lambda_sq = material.eps * v_star / (material.q * n_star * x_star * x_star);
    Ok(ScalingBases {
        v_star,
        n_star,
        x_star,
        d_star,
        mu_star,
        t_star,
        j_star,
        r_star,
        c_star,
        lambda_sq,
    })
}

/// The dimensionless problem coefficients plus their scaling bases.
#[derive(Debug, Clone)]
pub struct ScaledProblem {
    pub lambda_sq: f64,
    pub mu_n: f64,
    pub mu_p: f64,
    pub d_n: f64,
    pub d_p: f64,
    /// D_n / mu_n, the electron thermal-voltage scale (1 when V* = V_T).
    pub v_n: f64,
    /// D_p / mu_p.
    pub v_p: f64,
    pub n_ie: f64,
    pub tau_n: f64,
    pub tau_p: f64,
    pub c_n: f64,
    pub c_p: f64,
    pub bases: ScalingBases,
}

impl ScaledProblem {
    pub fn new(material: &MaterialParams, bases: ScalingBases) -> Self {
        let mu_n = material.mu_n / bases.mu_star;
        let mu_p = material.mu_p / bases.mu_star;
        let d_n = material.d_n / bases.d_star;
        let d_p = material.d_p / bases.d_star;
        Self {
            lambda_sq: bases.lambda_sq,
            mu_n,
            mu_p,
            d_n,
            d_p,
            v_n: d_n / mu_n,
            v_p: d_p / mu_p,
            n_ie: material.n_ie / bases.n_star,
            tau_n: material.tau_n / bases.t_star,
            tau_p: material.tau_p / bases.t_star,
            c_n: material.c_n / bases.c_star,
            c_p: material.c_p / bases.c_star,
            bases,
        }
    }

    /// Applied contact voltage in V to scaled units.
    pub fn scale_voltage(&self, volts: f64) -> f64 {
        volts / self.bases.v_star
    }

    /// Recombination R(n, p) and its analytic partial derivatives.
    pub fn recombination(&self, n: f64, p: f64) -> Recombination {
        let nie = self.n_ie;
        let q = n * p - nie * nie;
        let den = self.tau_p * (n + nie) + self.tau_n * (p + nie);
        // Unphysical Newton iterates can push the SRH denominator to zero or
        // below; clamping keeps the residual finite so the driver fails by
        // non-convergence rather than by arithmetic faults.
        let clamped = !(den > 1e-300);
        let den_c = if clamped { 1e-300 } else { den };
        let srh = q / den_c;
        let (dsrh_dn, dsrh_dp) = if clamped {
            (p / den_c, n / den_c)
        } else {
            (
                (p * den_c - q * self.tau_p) / (den_c * den_c),
                (n * den_c - q * self.tau_n) / (den_c * den_c),
            )
        };
        let cc = self.c_n * n + self.c_p * p;
        let auger = cc * q;
        let daug_dn = self.c_n * q + cc * p;
        let daug_dp = self.c_p * q + cc * n;
        Recombination {
            r: srh + auger,
            dr_dn: dsrh_dn + daug_dn,
            dr_dp: dsrh_dp + daug_dp,
            clamped,
        }
    }
}

/// Recombination rate with exact partials of the clamped expression.
#[derive(Debug, Clone, Copy)]
pub struct Recombination {
    pub r: f64,
    pub dr_dn: f64,
    pub dr_dp: f64,
    pub clamped: bool,
}

/// Scaled Ohmic-contact boundary values for net doping `n_doping` and
/// applied voltage `v_applied` (both scaled).
///
/// n = (N + sqrt(N^2 + 4 nie^2))/2 and p likewise with -N; the smaller root
/// is recovered as nie^2 / larger-root so |N|/nie ~ 1e12 stays exact.
pub fn ohmic_contact_values(n_doping: f64, n_ie: f64, v_applied: f64) -> (f64, f64, f64) {
    let s = (n_doping * n_doping + 4.0 * n_ie * n_ie).sqrt();
    let (n, p) = if n_doping >= 0.0 {
        let n = 0.5 * (n_doping + s);
        (n, n_ie * n_ie / n)
    } else {
        let p = 0.5 * (-n_doping + s);
        (n_ie * n_ie / p, p)
    };
    let psi = v_applied + (n / n_ie).ln();
    (psi, n, p)
}

/// Charge-neutral equilibrium potential asinh(N / (2 nie)), the Newton
/// initial guess away from contacts.
pub fn equilibrium_potential(n_doping: f64, n_ie: f64) -> f64 {
    (n_doping / (2.0 * n_ie)).asinh()
}
