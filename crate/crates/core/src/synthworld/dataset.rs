//! In-memory dataset and the generator that fills it.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    aod_from_pm, simulate_observations, step_dynamics, step_pm, stream_seed, AuxiliaryFrame, CouplingNoise, GridField,
    Meteorology, ObservationSet, Result, StateSnapshot, TimeGrid, Units, WorldConfig, WorldError,
};

/// Per-step channels, in storage order. Geopotential is static and stored once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Channel {
    Pm25,
    Aod550,
    T2m,
    U10,
    V10,
    Humidity,
    BcEmis,
    OcEmis,
    Geopotential,
}

impl Channel {
    pub const DYNAMIC: [Channel; 8] = [
        Channel::Pm25,
        Channel::Aod550,
        Channel::T2m,
        Channel::U10,
        Channel::V10,
        Channel::Humidity,
        Channel::BcEmis,
        Channel::OcEmis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::Pm25 => "pm25",
            Channel::Aod550 => "aod550",
            Channel::T2m => "t2m",
            Channel::U10 => "u10",
            Channel::V10 => "v10",
            Channel::Humidity => "humidity",
            Channel::BcEmis => "bc_emis",
            Channel::OcEmis => "oc_emis",
            Channel::Geopotential => "geopotential",
        }
    }

    pub fn units(self) -> Units {
        match self {
            Channel::Pm25 => Units::Concentration,
            Channel::Aod550 => Units::Dimensionless,
            Channel::T2m => Units::Kelvin,
            Channel::U10 | Channel::V10 => Units::MetersPerSecond,
            Channel::Humidity => Units::Percent,
            Channel::BcEmis | Channel::OcEmis => Units::EmissionRate,
            Channel::Geopotential => Units::Geopotential,
        }
    }

    fn slot(self) -> Option<usize> {
        Self::DYNAMIC.iter().position(|&c| c == self)
    }
}

/// What a dataset was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInfo {
    pub height: usize,
    pub width: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    /// SHA-256 (hex) of the world config.
    pub world_hash: String,
}

/// Truth states, auxiliary frames and observations over `[t0, t_end)`,
/// stored as `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    info: DatasetInfo,
    geopotential: Arc<[f32]>,
    frames: Vec<Vec<f32>>,
    observations: BTreeMap<usize, (Vec<f32>, Vec<bool>)>,
}

impl Dataset {
    pub fn new(info: DatasetInfo, geopotential: &[f32]) -> Result<Self> {
        let hw = info.height * info.width;
        if geopotential.len() != hw {
            return Err(WorldError::Shape {
                expected: (info.height, info.width),
                actual: (geopotential.len(), 1),
            });
        }
        Ok(Self {
            info,
            geopotential: geopotential.into(),
            frames: Vec::new(),
            observations: BTreeMap::new(),
        })
    }

    pub fn info(&self) -> &DatasetInfo {
        &self.info
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.info.grid
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.info.height, self.info.width)
    }

    fn hw(&self) -> usize {
        self.info.height * self.info.width
    }

    pub fn t_start(&self) -> usize {
        self.info.grid.t0
    }

    /// One past the last stored time index.
    pub fn t_stop(&self) -> usize {
        self.info.grid.t0 + self.frames.len()
    }

    pub fn contains(&self, t: usize) -> bool {
        (self.t_start()..self.t_stop()).contains(&t)
    }

    /// Appends the frame for the next time index.
    pub fn push_frame(&mut self, state: &StateSnapshot, aux: &AuxiliaryFrame) -> Result<()> {
        let dims = self.dims();
        state.pm25.check_dims(dims)?;
        state.aod550.check_dims(dims)?;
        let mut raw = Vec::with_capacity(8 * self.hw());
        raw.extend(state.pm25.values().iter().map(|&v| v as f32));
        raw.extend(state.aod550.values().iter().map(|&v| v as f32));
        for f in [&aux.t2m, &aux.u10, &aux.v10, &aux.humidity, &aux.bc_emis, &aux.oc_emis] {
            f.check_dims(dims)?;
            raw.extend(f.values().iter().map(|&v| v as f32));
        }
        self.frames.push(raw);
        Ok(())
    }

    /// Appends an already-packed frame (eight channels in [`Channel::DYNAMIC`] order).
    pub fn push_raw_frame(&mut self, raw: Vec<f32>) -> Result<()> {
        if raw.len() != 8 * self.hw() {
            return Err(WorldError::Shape {
                expected: self.dims(),
                actual: (raw.len(), 8),
            });
        }
        self.frames.push(raw);
        Ok(())
    }

    pub fn insert_observation(&mut self, obs: &ObservationSet) -> Result<()> {
        obs.values.check_dims(self.dims())?;
        let values = obs.values.values().iter().map(|&v| v as f32).collect();
        self.observations.insert(obs.time_index, (values, obs.mask.clone()));
        Ok(())
    }

    pub fn insert_raw_observation(&mut self, t: usize, values: Vec<f32>, mask: Vec<bool>) -> Result<()> {
        if values.len() != self.hw() || mask.len() != self.hw() {
            return Err(WorldError::Shape {
                expected: self.dims(),
                actual: (values.len(), mask.len()),
            });
        }
        self.observations.insert(t, (values, mask));
        Ok(())
    }

    pub fn raw_frame(&self, t: usize) -> Result<&[f32]> {
        if !self.contains(t) {
            return Err(WorldError::OutOfRange(t));
        }
        Ok(&self.frames[t - self.t_start()])
    }

    pub fn geopotential_raw(&self) -> &[f32] {
        &self.geopotential
    }

    pub fn channel(&self, t: usize, ch: Channel) -> Result<&[f32]> {
        match ch.slot() {
            None => {
                if !self.contains(t) {
                    return Err(WorldError::OutOfRange(t));
                }
                Ok(&self.geopotential)
            }
            Some(s) => {
                let hw = self.hw();
                Ok(&self.raw_frame(t)?[s * hw..(s + 1) * hw])
            }
        }
    }

    pub fn field(&self, t: usize, ch: Channel) -> Result<GridField> {
        let (h, w) = self.dims();
        GridField::from_f32(h, w, self.channel(t, ch)?, ch.units())
    }

    pub fn snapshot(&self, t: usize) -> Result<StateSnapshot> {
        Ok(StateSnapshot {
            time_index: t,
            pm25: self.field(t, Channel::Pm25)?,
            aod550: self.field(t, Channel::Aod550)?,
        })
    }

    pub fn aux(&self, t: usize) -> Result<AuxiliaryFrame> {
        Ok(AuxiliaryFrame {
            time_index: t,
            t2m: self.field(t, Channel::T2m)?,
            u10: self.field(t, Channel::U10)?,
            v10: self.field(t, Channel::V10)?,
            humidity: self.field(t, Channel::Humidity)?,
            geopotential: self.field(t, Channel::Geopotential)?,
            bc_emis: self.field(t, Channel::BcEmis)?,
            oc_emis: self.field(t, Channel::OcEmis)?,
        })
    }

    pub fn raw_observation(&self, t: usize) -> Option<(&[f32], &[bool])> {
        self.observations.get(&t).map(|(v, m)| (v.as_slice(), m.as_slice()))
    }

    pub fn observation(&self, t: usize) -> Option<ObservationSet> {
        let (h, w) = self.dims();
        self.observations.get(&t).map(|(v, m)| ObservationSet {
            time_index: t,
            values: GridField::from_f32(h, w, v, Units::Dimensionless).expect("stored with dataset dims"),
            mask: m.clone(),
        })
    }

    pub fn observation_times(&self) -> impl Iterator<Item = usize> + '_ {
        self.observations.keys().copied()
    }

    /// SHA-256 (hex) over every stored value, in a fixed order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.info.height as u64).to_le_bytes());
        h.update((self.info.width as u64).to_le_bytes());
        h.update((self.t_start() as u64).to_le_bytes());
        for v in self.geopotential.iter() {
            h.update(v.to_le_bytes());
        }
        for f in &self.frames {
            for v in f {
                h.update(v.to_le_bytes());
            }
        }
        for (t, (v, m)) in &self.observations {
            h.update((*t as u64).to_le_bytes());
            for x in v {
                h.update(x.to_le_bytes());
            }
            h.update(m.iter().map(|&b| b as u8).collect::<Vec<_>>());
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 (hex) of the config's canonical TOML form.
pub fn world_hash(world: &WorldConfig) -> String {
    let text = toml::to_string(world).expect("world config serialises");
    hex(&Sha256::digest(text.as_bytes()))
}

/// Spins the world up for `world.burn_in_steps`, then records every step of
/// `[grid.t0, grid.t_end)` and observations at multiples of `grid.k`.
pub fn generate_dataset(world: &WorldConfig, grid: &TimeGrid) -> Result<Dataset> {
    world.validate()?;
    grid.validate()?;
    if world.dt_hours != grid.dt_hours as f64 {
        return Err(WorldError::InvalidConfig(format!(
            "world dt_hours {} differs from time grid dt_hours {}",
            world.dt_hours, grid.dt_hours
        )));
    }
    let (h, w) = world.dims();
    let mut met = Meteorology::new(world)?;
    let mut coupling = CouplingNoise::new(world, 0);
    let mut obs_rng = ChaCha8Rng::seed_from_u64(stream_seed(world.seed, 3));
    let info = DatasetInfo {
        height: h,
        width: w,
        grid: *grid,
        seed: world.seed,
        world_hash: world_hash(world),
    };
    let mut data = Dataset::new(info, &met.geopotential().to_f32())?;

    let t0 = grid.t0 as i64;
    let mut pm = GridField::zeros(h, w, Units::Concentration);
    let mut aux = None;
    for s in (t0 - world.burn_in_steps as i64 + 1)..=t0 {
        let frame = met.frame(s)?;
        pm = step_pm(&pm, &frame, world)?;
        aux = Some(frame);
    }
    let mut aux = match aux {
        Some(a) => a,
        None => met.frame(t0)?,
    };
    aux.time_index = grid.t0;
    let aod550 = aod_from_pm(&pm, &aux.humidity, world, &mut coupling)?;
    let mut state = StateSnapshot {
        time_index: grid.t0,
        pm25: pm,
        aod550,
    };

    for t in grid.t0..grid.t_end {
        if t > grid.t0 {
            aux = met.frame(t as i64)?;
            state = step_dynamics(&state, &aux, world, &mut coupling)?;
        }
        let variance = state.pm25.variance();
        if variance < world.variance_floor {
            return Err(WorldError::Degenerate {
                variance,
                floor: world.variance_floor,
            });
        }
        data.push_frame(&state, &aux)?;
        if t % grid.k == 0 {
            let obs = simulate_observations(&state.aod550, t, world, &mut obs_rng);
            data.insert_observation(&obs)?;
        }
    }
    Ok(data)
}
