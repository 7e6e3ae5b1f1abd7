//! The three networks and their parameters as one checkpointable unit.

use std::path::Path;

use super::checkpoint;
use super::config::ModelSpec;
use crate::adversary::{Discriminator, SpectralState};
use crate::error::{Error, Result};
use crate::inpaint::Inpainter;
use crate::maskdetect::Detector;
use crate::rng::SplitMix64;
use crate::tensor::{ParamStore, Tensor};

const SPECTRAL_PREFIX: &str = "spectral.";

#[derive(Debug, Clone)]
pub struct Models {
    pub spec: ModelSpec,
    pub detector: Detector,
    pub inpainter: Inpainter,
    pub disc: Discriminator,
    pub det_params: ParamStore,
    pub gen_params: ParamStore,
    pub disc_params: ParamStore,
}

impl Models {
    /// Fresh weights; each network draws from its own stream of `seed`.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let detector = Detector::new(spec.detector()?, spec.height, spec.width)?;
        let inpainter = Inpainter::new(spec.inpainter());
        let mut disc = Discriminator::new(spec.discriminator());
        let det_params = detector.init_store(SplitMix64::for_index(seed, 0).next_u64());
        let gen_params = inpainter.init_store(SplitMix64::for_index(seed, 1).next_u64());
        let mut disc_params = ParamStore::new();
        disc.init(&mut disc_params, &mut SplitMix64::for_index(seed, 2))?;
        Ok(Self {
            spec,
            detector,
            inpainter,
            disc,
            det_params,
            gen_params,
            disc_params,
        })
    }

    /// Everything needed to resume: metadata, weights and power-iteration vectors.
    pub fn to_store(&self) -> ParamStore {
        let mut s = ParamStore::new();
        self.spec.write_meta(&mut s);
        s.merge(&self.det_params);
        s.merge(&self.gen_params);
        s.merge(&self.disc_params);
        for (name, st) in self.disc.layer_names().iter().zip(self.disc.state()) {
            s.insert(format!("{SPECTRAL_PREFIX}{name}.u"), vec_tensor(&st.u));
            s.insert(format!("{SPECTRAL_PREFIX}{name}.v"), vec_tensor(&st.v));
        }
        s
    }

    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let spec = ModelSpec::read_meta(store)?;
        let detector = Detector::new(spec.detector()?, spec.height, spec.width)?;
        let inpainter = Inpainter::new(spec.inpainter());
        let mut disc = Discriminator::new(spec.discriminator());
        let pick = |prefix: &str| -> ParamStore {
            store
                .with_prefix(prefix)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        let (det_params, gen_params, disc_params) = (pick("det."), pick("gen."), pick("disc."));
        let mut state = Vec::new();
        for name in disc.layer_names() {
            let get = |suffix: &str| -> Result<Vec<f64>> {
                let key = format!("{SPECTRAL_PREFIX}{name}.{suffix}");
                store
                    .get(&key)
                    .map(|t| t.data().to_vec())
                    .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))
            };
            state.push(SpectralState { u: get("u")?, v: get("v")? });
        }
        disc.set_state(state)?;
        let models = Self {
            spec,
            detector,
            inpainter,
            disc,
            det_params,
            gen_params,
            disc_params,
        };
        models.check_complete()?;
        Ok(models)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.to_store())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_store(&checkpoint::load(path)?)
    }

    /// Every parameter the architecture expects is present with the right shape.
    fn check_complete(&self) -> Result<()> {
        let fresh = Self::init(self.spec.clone(), 0)?;
        for (have, want) in [
            (&self.det_params, &fresh.det_params),
            (&self.gen_params, &fresh.gen_params),
            (&self.disc_params, &fresh.disc_params),
        ] {
            for (k, t) in want.iter() {
                match have.get(k) {
                    Some(h) if h.shape() == t.shape() => {}
                    Some(h) => {
                        return Err(Error::Checkpoint(format!(
                            "{k}: shape {:?}, architecture expects {:?}",
                            h.shape(),
                            t.shape()
                        )))
                    }
                    None => return Err(Error::Checkpoint(format!("missing {k}"))),
                }
            }
        }
        Ok(())
    }
}

fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::new(&[v.len()], v.to_vec()).expect("non-empty vector")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ModelSize;

    fn spec() -> ModelSpec {
        ModelSpec {
            size: ModelSize::Toy,
            height: 32,
            width: 32,
            alpha: 0.08,
        }
    }

    #[test]
    fn store_round_trip_keeps_every_tensor() {
        let m = Models::init(spec(), 3).unwrap();
        let s = m.to_store();
        let back = Models::from_store(&s).unwrap();
        assert_eq!(back.to_store(), s);
        assert_eq!(back.spec, m.spec);
    }

    #[test]
    fn missing_weight_is_reported() {
        let m = Models::init(spec(), 3).unwrap();
        let s: ParamStore = m
            .to_store()
            .iter()
            .filter(|(k, _)| k.as_str() != "gen.out.weight")
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        assert!(matches!(Models::from_store(&s), Err(Error::Checkpoint(_))));
    }
}
