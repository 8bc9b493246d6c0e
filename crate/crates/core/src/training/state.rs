use std::path::Path;

use super::TrainConfig;
use crate::autodiff::{AdamState, Tensor};
use crate::error::{Error, Result};
use crate::model::{model_from_file, model_to_file, ArrayFile, Model, NamedArray};
use crate::router::{PolicyKind, RouterParams};
use crate::seed::derive_seed;

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// One per router site; empty unless the learned policy is active.
    pub routers: Vec<RouterParams>,
    pub adam: AdamState,
    /// Completed optimizer steps.
    pub step: usize,
}

impl TrainState {
    pub fn fresh(model: Model, cfg: &TrainConfig) -> Result<Self> {
        let routers = if cfg.uses_masked_pass() && cfg.policy.kind == PolicyKind::Router {
            (0..model.config.router_layers.len())
                .map(|s| RouterParams::init(model.config.d_model, cfg.d_r, cfg.tau, derive_seed(cfg.seed, &format!("router/{s}"))))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mut state = TrainState { model, routers, adam: AdamState { step: 0, m: vec![], v: vec![] }, step: 0 };
        state.adam = AdamState::new(&state.params());
        Ok(state)
    }

    /// Model tensors followed by each router's tensors.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.model.weights.named().into_iter().map(|(_, t)| t).collect();
        for r in &self.routers {
            out.extend(r.named().into_iter().map(|(_, t)| t));
        }
        out
    }

    /// Weight decay applies to matrices only.
    pub fn decay_mask(&self) -> Vec<bool> {
        self.params().iter().map(|t| t.shape().len() == 2).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = model_to_file(&self.model);
        file.header[0].1 = "train_state".into();
        file.header.push(("step".into(), self.step.to_string()));
        file.header.push(("adam_step".into(), self.adam.step.to_string()));
        file.header.push(("routers".into(), self.routers.len().to_string()));
        for (s, r) in self.routers.iter().enumerate() {
            file.header.push((format!("router{s}.eps_den"), format!("{:?}", r.eps_den)));
            file.header.push((format!("router{s}.tau"), format!("{:?}", r.tau)));
            for (name, t) in r.named() {
                file.arrays.push(NamedArray::from_tensor(format!("router{s}.{name}"), t));
            }
        }
        for (i, (m, v)) in self.adam.m.iter().zip(&self.adam.v).enumerate() {
            file.arrays.push(NamedArray::from_tensor(format!("adam.m.{i}"), m));
            file.arrays.push(NamedArray::from_tensor(format!("adam.v.{i}"), v));
        }
        file.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = ArrayFile::read(path)?;
        if file.header_value("kind") != Some("train_state") {
            return Err(Error::Format(format!("{} is not a training state file", path.display())));
        }
        let num = |key: &str| -> Result<u64> {
            file.header_value(key).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("training state lacks `{key}`")))
        };
        let float = |key: &str| -> Result<f64> {
            file.header_value(key).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Format(format!("training state lacks `{key}`")))
        };
        let array = |name: &str| -> Result<Tensor> {
            file.array(name).ok_or_else(|| Error::Format(format!("missing array `{name}`")))?.to_tensor()
        };
        let model = model_from_file(&file)?;
        let routers = (0..num("routers")? as usize)
            .map(|s| {
                let t = |n: &str| array(&format!("router{s}.{n}"));
                Ok(RouterParams {
                    wq: t("wq")?,
                    wk: t("wk")?,
                    wv: t("wv")?,
                    wo: t("wo")?,
                    wp: t("wp")?,
                    alpha: t("alpha")?,
                    eps_den: float(&format!("router{s}.eps_den"))?,
                    tau: float(&format!("router{s}.tau"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut state = TrainState { model, routers, adam: AdamState { step: 0, m: vec![], v: vec![] }, step: num("step")? as usize };
        let n = state.params().len();
        state.adam = AdamState {
            step: num("adam_step")?,
            m: (0..n).map(|i| array(&format!("adam.m.{i}"))).collect::<Result<_>>()?,
            v: (0..n).map(|i| array(&format!("adam.v.{i}"))).collect::<Result<_>>()?,
        };
        for (p, m) in state.params().iter().zip(&state.adam.m) {
            if p.shape() != m.shape() {
                return Err(Error::Format("optimizer moments do not match parameter shapes".into()));
            }
        }
        Ok(state)
    }
}
