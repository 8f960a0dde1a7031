//! The dual-flow model over a shared latent space.
//!
//! Both flows map their domain to the same standard Gaussian latent `Z` in
//! the forward direction (data to latent). The cross maps are therefore
//! `ŷ = f_Y⁻¹(f_X(x))` and `x̂ = f_X⁻¹(f_Y(y))`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use flowscale_flow::{FlowSpec, FlowStack};
use flowscale_tensor::{Checkpoint, Graph, ParameterStore, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::critic::Critic;
use crate::error::{AlignError, Result};

pub const FLOW_X: &str = "fx.";
pub const FLOW_Y: &str = "fy.";
pub const CRITIC_X: &str = "cx.";
pub const CRITIC_Y: &str = "cy.";

const HEADER_FORMAT: &str = "alignflow";
const HEADER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossDirection {
    XToY,
    YToX,
}

/// Architecture for [`AlignFlowModel::new`]; both flows share one spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub flow: FlowSpec,
    /// Critic channel widths, the last of which must be 1. Empty selects
    /// linear critics.
    pub critic_widths: Vec<usize>,
    /// Start `f_Y` from the same parameters as `f_X`, so the initial cross
    /// map is the identity.
    pub shared_init: bool,
}

impl ModelSpec {
    pub fn new(flow: FlowSpec) -> Self {
        ModelSpec { flow, critic_widths: vec![64, 128, 256, 1], shared_init: false }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    flow_x: FlowStack,
    flow_y: FlowStack,
    critic_x: Critic,
    critic_y: Critic,
    shared_init: bool,
    step: u64,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct AlignFlowModel {
    pub flow_x: FlowStack,
    pub flow_y: FlowStack,
    pub critic_x: Critic,
    pub critic_y: Critic,
    pub store: ParameterStore,
    pub shared_init: bool,
    /// Number of completed training steps.
    pub step: u64,
    /// Free-form data carried through checkpoints (normalization constants,
    /// grid metadata).
    pub metadata: serde_json::Value,
}

impl AlignFlowModel {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let flow_x = FlowStack::glow(FLOW_X, &spec.flow)?;
        let flow_y = FlowStack::glow(FLOW_Y, &spec.flow)?;
        let input = flow_x.input;
        let (critic_x, critic_y) = if spec.critic_widths.is_empty() {
            (Critic::linear(CRITIC_X, input), Critic::linear(CRITIC_Y, input))
        } else {
            (
                Critic::patch_gan(CRITIC_X, input, spec.critic_widths.clone())?,
                Critic::patch_gan(CRITIC_Y, input, spec.critic_widths.clone())?,
            )
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        flow_x.init_parameters(&mut store, &mut rng)?;
        flow_y.init_parameters(&mut store, &mut rng)?;
        critic_x.init_parameters(&mut store, &mut rng)?;
        critic_y.init_parameters(&mut store, &mut rng)?;
        let mut model = AlignFlowModel {
            flow_x,
            flow_y,
            critic_x,
            critic_y,
            store,
            shared_init: spec.shared_init,
            step: 0,
            metadata: serde_json::Value::Null,
        };
        if spec.shared_init {
            model.copy_flow_parameters()?;
        }
        Ok(model)
    }

    /// Assemble a model from parts; `store` must hold every parameter.
    pub fn from_parts(flow_x: FlowStack, flow_y: FlowStack, critic_x: Critic, critic_y: Critic, store: ParameterStore) -> Result<Self> {
        let model = AlignFlowModel {
            flow_x,
            flow_y,
            critic_x,
            critic_y,
            store,
            shared_init: false,
            step: 0,
            metadata: serde_json::Value::Null,
        };
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        if self.flow_x.dim() != self.flow_y.dim() {
            return Err(AlignError::Config(format!(
                "latent dimensions differ: {} for X, {} for Y",
                self.flow_x.dim(),
                self.flow_y.dim()
            )));
        }
        if self.critic_x.input() != self.flow_x.input || self.critic_y.input() != self.flow_y.input {
            return Err(AlignError::Config("critic input shapes must match their domains".into()));
        }
        let prefixes = [self.flow_x.prefix.as_str(), self.flow_y.prefix.as_str(), self.critic_x.prefix(), self.critic_y.prefix()];
        for (i, a) in prefixes.iter().enumerate() {
            for b in &prefixes[i + 1..] {
                if a.starts_with(b) || b.starts_with(a) {
                    return Err(AlignError::Config(format!("parameter prefixes {a:?} and {b:?} overlap")));
                }
            }
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.flow_x.dim()
    }

    pub fn is_initialized(&self) -> bool {
        self.flow_x.initialized && self.flow_y.initialized
    }

    /// Overwrite every `f_Y` parameter with its `f_X` counterpart.
    pub fn copy_flow_parameters(&mut self) -> Result<()> {
        if self.flow_x.layers != self.flow_y.layers || self.flow_x.input != self.flow_y.input {
            return Err(AlignError::Config("shared initialization needs identical flow architectures".into()));
        }
        let pairs: Vec<(String, Tensor)> = self
            .store
            .iter()
            .filter_map(|(name, p)| {
                name.strip_prefix(self.flow_x.prefix.as_str())
                    .map(|rest| (format!("{}{rest}", self.flow_y.prefix), p.value.clone()))
            })
            .collect();
        for (name, value) in pairs {
            self.store.set(&name, value)?;
        }
        Ok(())
    }

    /// Data-dependent actnorm initialization of both flows. With shared
    /// initialization `f_X` is fit on both batches pooled and copied into
    /// `f_Y`, so neither domain starts under statistics that only fit the
    /// other.
    pub fn initialize(&mut self, batch_x: &Tensor, batch_y: &Tensor) -> Result<()> {
        if self.shared_init {
            let pooled = Tensor::concat(&[batch_x, batch_y], 0)?;
            self.flow_x.initialize(&mut self.store, &pooled)?;
            self.copy_flow_parameters()?;
            self.flow_y.initialized = true;
        } else {
            self.flow_x.initialize(&mut self.store, batch_x)?;
            self.flow_y.initialize(&mut self.store, batch_y)?;
        }
        Ok(())
    }

    pub fn source_flow(&self, direction: CrossDirection) -> &FlowStack {
        match direction {
            CrossDirection::XToY => &self.flow_x,
            CrossDirection::YToX => &self.flow_y,
        }
    }

    pub fn target_flow(&self, direction: CrossDirection) -> &FlowStack {
        match direction {
            CrossDirection::XToY => &self.flow_y,
            CrossDirection::YToX => &self.flow_x,
        }
    }

    /// Cross map on a graph, returning `(mapped, latent)`.
    pub fn cross_map_graph(&self, g: &mut Graph<'_>, input: Var, direction: CrossDirection) -> Result<(Var, Var)> {
        let (z, _) = self.source_flow(direction).forward(g, input)?;
        let (out, _) = self.target_flow(direction).inverse(g, z)?;
        Ok((out, z))
    }

    pub fn cross_map(&self, input: &Tensor, direction: CrossDirection) -> Result<Tensor> {
        let mut g = Graph::inference(&self.store);
        let x = g.input(input.clone());
        let (out, _) = self.cross_map_graph(&mut g, x, direction)?;
        Ok(g.value(out).clone())
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let header = Header {
            format: HEADER_FORMAT.into(),
            version: HEADER_VERSION,
            flow_x: self.flow_x.clone(),
            flow_y: self.flow_y.clone(),
            critic_x: self.critic_x.clone(),
            critic_y: self.critic_y.clone(),
            shared_init: self.shared_init,
            step: self.step,
            metadata: self.metadata.clone(),
        };
        Ok(Checkpoint { header: serde_json::to_string(&header)?, store: self.store.clone() })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let header: Header = serde_json::from_str(&ckpt.header)?;
        if header.format != HEADER_FORMAT || header.version != HEADER_VERSION {
            return Err(AlignError::Config(format!(
                "not an alignflow checkpoint (format {:?}, version {})",
                header.format, header.version
            )));
        }
        let mut model = AlignFlowModel::from_parts(header.flow_x, header.flow_y, header.critic_x, header.critic_y, ckpt.store)?;
        model.shared_init = header.shared_init;
        model.step = header.step;
        model.metadata = header.metadata;
        // a dry bind of every parameter catches a store that does not match
        // the architecture before any training or sampling starts
        let probe = Tensor::zeros(&[1, model.flow_x.input[0], model.flow_x.input[1], model.flow_x.input[2]])?;
        model.flow_x.encode(&model.store, &probe)?;
        let probe = Tensor::zeros(&[1, model.flow_y.input[0], model.flow_y.input[1], model.flow_y.input[2]])?;
        model.flow_y.encode(&model.store, &probe)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.to_checkpoint()?.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r = BufReader::new(File::open(path)?);
        AlignFlowModel::from_checkpoint(Checkpoint::read_from(r)?)
    }
}
