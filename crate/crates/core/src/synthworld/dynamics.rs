//! Flux-form tracer transport.

use super::{aod_from_pm, AuxiliaryFrame, CouplingNoise, GridField, Result, StateSnapshot, WorldConfig, WorldError};

/// Face velocities in Courant units: `cx[i][j]` on the face east of cell
/// `(i, j)`, `cy[i][j]` on the face north of it. Closed faces are 0.
fn face_courants(aux: &AuxiliaryFrame, cfg: &WorldConfig) -> (Vec<f64>, Vec<f64>) {
    let (h, w) = cfg.dims();
    let s = cfg.dt_seconds() / cfg.dx_m();
    let u = aux.u10.values();
    let v = aux.v10.values();
    let mut cx = vec![0.0; h * w];
    let mut cy = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let e = i * w + (j + 1) % w;
            cx[i * w + j] = 0.5 * (u[i * w + j] + u[e]) * s;
            if i + 1 < h || cfg.periodic_rows {
                let n = ((i + 1) % h) * w + j;
                cy[i * w + j] = 0.5 * (v[i * w + j] + v[n]) * s;
            }
        }
    }
    (cx, cy)
}

/// Largest face Courant number for the winds of `aux`.
pub fn courant_number(aux: &AuxiliaryFrame, cfg: &WorldConfig) -> f64 {
    let (cx, cy) = face_courants(aux, cfg);
    cx.iter().chain(&cy).fold(0.0, |m, c| m.max(c.abs()))
}

/// Advances PM2.5 one step: upwind advection, diffusion, emission,
/// deposition, clipping.
pub fn step_pm(pm: &GridField, aux: &AuxiliaryFrame, cfg: &WorldConfig) -> Result<GridField> {
    let (h, w) = cfg.dims();
    pm.check_dims((h, w))?;
    aux.u10.check_dims((h, w))?;
    aux.v10.check_dims((h, w))?;
    let (cx, cy) = face_courants(aux, cfg);
    let courant = cx.iter().chain(&cy).fold(0.0, |m: f64, c| m.max(c.abs()));
    if courant > 1.0 + 1e-12 {
        return Err(WorldError::Cfl { courant });
    }
    let c = pm.values();
    let north = |i: usize| (i + 1) % h;
    let d = cfg.diffusion_number();

    // Advective plus diffusive flux through every east and north face.
    let mut fx = vec![0.0; h * w];
    let mut fy = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let here = i * w + j;
            let e = i * w + (j + 1) % w;
            let a = cx[here];
            fx[here] = if a >= 0.0 { a * c[here] } else { a * c[e] } + d * (c[here] - c[e]);
            if i + 1 < h || cfg.periodic_rows {
                let n = north(i) * w + j;
                let b = cy[here];
                fy[here] = if b >= 0.0 { b * c[here] } else { b * c[n] } + d * (c[here] - c[n]);
            }
        }
    }

    let mut out = vec![0.0; h * w];
    let keep = 1.0 - cfg.deposition_rate * cfg.dt_hours;
    let bc = aux.bc_emis.values();
    let oc = aux.oc_emis.values();
    for i in 0..h {
        let south = if i > 0 {
            Some(i - 1)
        } else if cfg.periodic_rows {
            Some(h - 1)
        } else {
            None
        };
        for j in 0..w {
            let here = i * w + j;
            let west = i * w + (j + w - 1) % w;
            let mut v = c[here] - fx[here] + fx[west] - fy[here];
            if let Some(s) = south {
                v += fy[s * w + j];
            }
            v += (cfg.bc_weight * bc[here] + cfg.oc_weight * oc[here]) * cfg.dt_hours;
            out[here] = (v * keep).max(0.0);
        }
    }
    GridField::new(h, w, out, pm.units)
}

/// Advances the full state one step; AOD550 is re-derived from the new PM2.5.
pub fn step_dynamics(
    state: &StateSnapshot,
    aux: &AuxiliaryFrame,
    cfg: &WorldConfig,
    noise: &mut CouplingNoise,
) -> Result<StateSnapshot> {
    let pm25 = step_pm(&state.pm25, aux, cfg)?;
    let aod550 = aod_from_pm(&pm25, &aux.humidity, cfg, noise)?;
    Ok(StateSnapshot {
        time_index: state.time_index + 1,
        pm25,
        aod550,
    })
}
