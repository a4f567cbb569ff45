//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u32` metadata length, JSON
//! metadata, `u32` tensor count, named tensors (see `nn::archive`), then the
//! SHA-256 of every preceding byte.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{FetchQuest, ENV_VERSION};
use crate::model::{CoPolicy, CodeSampler, Discriminator, RecognitionNet};
use crate::nn::archive::{write_tensor, write_u32, Reader};
use crate::nn::{Adam, AdamConfig, Mlp};
use crate::train::{Learner, TrainConfig};
use crate::{CoreError, Scalar};

pub const MAGIC: &[u8; 8] = b"COGAILCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub env_version: String,
    pub layout_hash: String,
    pub scalar: String,
    pub config_hash: String,
    pub seed: u64,
    pub episode: usize,
    pub sampler_counter: u64,
    pub frozen_human: bool,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: CheckpointMeta,
    pub learner: Learner<T>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |source| CoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_group<T: Scalar>(out: &mut Vec<u8>, prefix: &str, tensors: &[&Array2<T>]) {
    for (i, t) in tensors.iter().enumerate() {
        write_tensor(out, &format!("{prefix}.{i}"), t);
    }
}

fn write_adam<T: Scalar>(out: &mut Vec<u8>, prefix: &str, opt: &Adam<T>) {
    out.extend_from_slice(&opt.step.to_le_bytes());
    write_group(out, &format!("{prefix}.m"), &opt.first.iter().collect::<Vec<_>>());
    write_group(out, &format!("{prefix}.v"), &opt.second.iter().collect::<Vec<_>>());
}

fn read_group<T: Scalar>(r: &mut Reader<'_>, prefix: &str, n: usize) -> Result<Vec<Array2<T>>, CoreError> {
    (0..n).map(|i| Ok(r.tensor::<T>(&format!("{prefix}.{i}"))?)).collect()
}

fn read_adam<T: Scalar>(r: &mut Reader<'_>, prefix: &str, n: usize) -> Result<Adam<T>, CoreError> {
    let step = r.u64()?;
    let first = read_group(r, &format!("{prefix}.m"), n)?;
    let second = read_group(r, &format!("{prefix}.v"), n)?;
    Ok(Adam {
        config: AdamConfig::default(),
        step,
        first,
        second,
    })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(env: &FetchQuest, cfg: &TrainConfig, learner: Learner<T>) -> Self {
        Self {
            meta: CheckpointMeta {
                env_version: ENV_VERSION.to_string(),
                layout_hash: env.layout.hash(),
                scalar: T::TAG.to_string(),
                config_hash: cfg.hash(),
                seed: cfg.seed,
                episode: learner.episode,
                sampler_counter: learner.sampler.counter,
                frozen_human: learner.frozen_human.is_some(),
                config: cfg.clone(),
            },
            learner,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.meta.config
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let l = &self.learner;
        let mut out = MAGIC.to_vec();
        write_u32(&mut out, CHECKPOINT_VERSION);
        let meta = serde_json::to_vec(&self.meta).expect("meta serializes");
        write_u32(&mut out, meta.len() as u32);
        out.extend_from_slice(&meta);
        write_group(&mut out, "policy", &l.policy.tensors());
        write_group(&mut out, "psi", &l.psi.net.tensors().iter().collect::<Vec<_>>());
        write_group(&mut out, "disc", &l.disc.net.tensors().iter().collect::<Vec<_>>());
        if let Some(h) = &l.frozen_human {
            write_group(&mut out, "frozen_human", &h.tensors().iter().collect::<Vec<_>>());
        }
        write_adam(&mut out, "opt_policy", &l.opt_policy);
        write_adam(&mut out, "opt_actor_aux", &l.opt_actor_aux);
        write_adam(&mut out, "opt_psi", &l.opt_psi);
        write_adam(&mut out, "opt_disc", &l.opt_disc);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CoreError> {
        if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(CoreError::Format("not a checkpoint file".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(CoreError::Checksum);
        }
        let mut r = Reader::new(&body[MAGIC.len()..]);
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(CoreError::Version {
                expected: CHECKPOINT_VERSION.to_string(),
                found: version.to_string(),
            });
        }
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| CoreError::Format(format!("checkpoint metadata: {e}")))?;
        if meta.env_version != ENV_VERSION {
            return Err(CoreError::Version {
                expected: ENV_VERSION.into(),
                found: meta.env_version,
            });
        }
        if meta.scalar != T::TAG {
            return Err(CoreError::Version {
                expected: T::TAG.into(),
                found: meta.scalar,
            });
        }
        let cfg = &meta.config;
        let hist = crate::demos::HistoryWindow::flat_len(cfg.history);

        let actor_spec = CoPolicy::<T>::actor_spec();
        let critic_spec = CoPolicy::<T>::critic_spec();
        let na = 2 * actor_spec.layers();
        let nc = 2 * critic_spec.layers();
        let mut policy_t = read_group::<T>(&mut r, "policy", na + 1 + nc)?;
        let critic_t = policy_t.split_off(na + 1);
        let log_std = policy_t.pop().expect("log_std present");
        let policy = CoPolicy {
            actor: Mlp::from_tensors(actor_spec.clone(), policy_t)?,
            log_std,
            critic: Mlp::from_tensors(critic_spec, critic_t)?,
        };
        let psi_spec = RecognitionNet::<T>::spec(hist);
        let psi = RecognitionNet {
            net: Mlp::from_tensors(psi_spec.clone(), read_group(&mut r, "psi", 2 * psi_spec.layers())?)?,
        };
        let input = cfg.mode.disc_input();
        let disc_spec = Discriminator::<T>::spec(input);
        let disc = Discriminator {
            net: Mlp::from_tensors(disc_spec.clone(), read_group(&mut r, "disc", 2 * disc_spec.layers())?)?,
            mode: cfg.disc_loss,
            input,
        };
        let frozen_human = if meta.frozen_human {
            Some(Mlp::from_tensors(actor_spec, read_group(&mut r, "frozen_human", na)?)?)
        } else {
            None
        };
        let learner = Learner {
            opt_policy: read_adam(&mut r, "opt_policy", na + 1 + nc)?,
            opt_actor_aux: read_adam(&mut r, "opt_actor_aux", na)?,
            opt_psi: read_adam(&mut r, "opt_psi", 2 * psi.net.spec().layers())?,
            opt_disc: read_adam(&mut r, "opt_disc", 2 * disc.net.spec().layers())?,
            policy,
            psi,
            disc,
            frozen_human,
            sampler: CodeSampler {
                counter: meta.sampler_counter,
            },
            episode: meta.episode,
        };
        if r.remaining() != 0 {
            return Err(CoreError::Format(format!(
                "{} trailing bytes in checkpoint",
                r.remaining()
            )));
        }
        Ok(Self { meta, learner })
    }

    pub fn save(&self, path: &Path) -> Result<(), CoreError> {
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, CoreError> {
        Self::from_bytes(&std::fs::read(path).map_err(io_err(path))?)
    }

    /// Fails unless the checkpoint was trained on `env`'s layout.
    pub fn check_env(&self, env: &FetchQuest) -> Result<(), CoreError> {
        let want = env.layout.hash();
        if self.meta.layout_hash != want {
            return Err(CoreError::Version {
                expected: want,
                found: self.meta.layout_hash.clone(),
            });
        }
        Ok(())
    }
}

/// Conventional file name for the checkpoint after `episode` units.
pub fn checkpoint_name(mode: &str, seed: u64, episode: usize) -> String {
    format!("{mode}-s{seed}-e{episode:05}.ckpt")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::{generate_dataset, DatasetSpec};
    use crate::ppo::PpoConfig;
    use crate::train::{Mode, Trainer};

    fn trained(mode: Mode) -> Checkpoint<f32> {
        let env = FetchQuest::default();
        let ds = generate_dataset(&env, &DatasetSpec::new(4, [0.25; 4], 0)).unwrap();
        let cfg = TrainConfig {
            mode,
            episodes: 1,
            steps_per_episode: 300,
            bc_epochs: 1,
            warm_start_epochs: 1,
            bc_reg_steps: 1,
            ppo: PpoConfig {
                epochs: 1,
                ..PpoConfig::default()
            },
            ..TrainConfig::default()
        };
        let mut t = Trainer::<f32>::new(&env, Some(&ds), cfg.clone()).unwrap();
        t.run(|_| Ok(()), |_| Ok(())).unwrap();
        Checkpoint::new(&env, &cfg, t.learner)
    }

    #[test]
    fn round_trip_is_byte_identical_for_every_mode() {
        for mode in Mode::ALL {
            let ck = trained(mode);
            let bytes = ck.to_bytes();
            let back = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
            assert_eq!(back, ck, "{mode:?}");
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corruption_and_wrong_scalar_are_rejected() {
        let bytes = trained(Mode::Magail).to_bytes();
        let mut bad = bytes.clone();
        let mid = bad.len() / 2;
        bad[mid] ^= 1;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad), Err(CoreError::Checksum)));
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 5]).is_err());
        assert!(matches!(
            Checkpoint::<f64>::from_bytes(&bytes),
            Err(CoreError::Version { .. })
        ));
        assert!(Checkpoint::<f32>::from_bytes(b"hello").is_err());
    }

    #[test]
    fn file_names_sort_by_episode() {
        assert_eq!(checkpoint_name("cogail", 300, 10), "cogail-s300-e00010.ckpt");
        assert!(checkpoint_name("x", 1, 9) < checkpoint_name("x", 1, 10));
    }
}
