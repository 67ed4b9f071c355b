//! Full network: front end, block stack, mixture of experts, per-task heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Eval, Graph, ParamStore};
use crate::bimamba::{stack_forward, BiMambaBlock, BlockConfig, Directionality};
use crate::error::{Error, Result};
use crate::moe::{GateDecision, GateMode, MoeConfig, MoeLayer, MoePlacement};
use crate::nn::LinearParams;
use crate::ops::GraphExt;
use crate::ssm::ScanMode;
use crate::st_adaptive::{validate_tasks, StAdaptive, TaskSpec, TokenizerConfig};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EegMambaConfig {
    pub d_model: usize,
    pub n_blocks: usize,
    pub d_state: usize,
    pub expand: usize,
    pub d_conv: usize,
    pub ssm_skip: bool,
    pub directionality: Directionality,
    pub scan: ScanMode,
    pub tokenizer: TokenizerConfig,
    /// `None` disables the mixture of experts; heads read the class token.
    pub moe: Option<MoeConfig>,
    pub tasks: Vec<TaskSpec>,
}

impl EegMambaConfig {
    /// 8 blocks, width 256, 8 task experts plus a universal expert, top-2.
    pub fn multi_task(tasks: Vec<TaskSpec>) -> Self {
        Self {
            d_model: 256,
            n_blocks: 8,
            d_state: 16,
            expand: 2,
            d_conv: 4,
            ssm_skip: true,
            directionality: Directionality::default(),
            scan: ScanMode::Sequential,
            tokenizer: TokenizerConfig::default(),
            moe: Some(MoeConfig::default()),
            tasks,
        }
    }

    /// 2 blocks, width 128, no mixture of experts.
    pub fn single_task(task: TaskSpec) -> Self {
        Self {
            d_model: 128,
            n_blocks: 2,
            moe: None,
            ..Self::multi_task(vec![TaskSpec { task_id: 0, ..task }])
        }
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            expand: self.expand,
            d_state: self.d_state,
            d_conv: self.d_conv,
            ssm_skip: self.ssm_skip,
            directionality: self.directionality,
            scan: self.scan,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 {
            return Err(Error::Config("d_model must be positive".into()));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be at least 1".into()));
        }
        self.block_config().validate()?;
        self.tokenizer.validate()?;
        validate_tasks(&self.tasks)?;
        if let Some(m) = &self.moe {
            m.validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct EegMamba {
    pub cfg: EegMambaConfig,
    pub front: StAdaptive,
    pub blocks: Vec<BiMambaBlock>,
    /// One layer after the stack, one per block, or none.
    pub moe: Vec<MoeLayer>,
    pub heads: Vec<LinearParams>,
}

/// Result of one forward call.
pub struct ForwardOutput<V> {
    pub logits: V,
    /// Class token entering the mixture of experts (or the heads).
    pub features: V,
    /// Routing of the last MoE layer, one per row.
    pub decisions: Vec<GateDecision>,
    pub balance: Option<V>,
    pub z: Option<V>,
}

impl EegMamba {
    /// Allocate parameters for `cfg` in a fresh store.
    pub fn build<E: Element, R: Rng + ?Sized>(cfg: &EegMambaConfig, rng: &mut R) -> Result<(Self, ParamStore<E>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let front = StAdaptive::init(&mut store, "front", cfg.d_model, &cfg.tokenizer, &cfg.tasks, rng)?;
        let bc = cfg.block_config();
        let blocks = (0..cfg.n_blocks)
            .map(|i| BiMambaBlock::init(&mut store, &format!("block.{i}"), &bc, rng))
            .collect::<Result<Vec<_>>>()?;
        let moe = match &cfg.moe {
            None => Vec::new(),
            Some(m) => {
                let layers = match m.placement {
                    MoePlacement::AfterBlocks => 1,
                    MoePlacement::EachBlock => cfg.n_blocks,
                };
                (0..layers)
                    .map(|i| MoeLayer::init(&mut store, &format!("moe.{i}"), cfg.d_model, cfg.tasks.len(), m, rng))
                    .collect::<Result<Vec<_>>>()?
            }
        };
        let heads = cfg
            .tasks
            .iter()
            .map(|t| LinearParams::init(&mut store, &format!("head.{}", t.task_id), cfg.d_model, t.num_classes, true, rng))
            .collect();
        Ok((
            Self {
                cfg: cfg.clone(),
                front,
                blocks,
                moe,
                heads,
            },
            store,
        ))
    }

    pub fn num_tasks(&self) -> usize {
        self.cfg.tasks.len()
    }

    pub fn task(&self, task_id: usize) -> Result<&TaskSpec> {
        self.cfg.tasks.get(task_id).ok_or(Error::UnknownTask(task_id))
    }

    fn moe_step<E: Element, G: Graph<E>>(
        &self,
        g: &mut G,
        layer: &MoeLayer,
        cls: &G::Var,
        task_id: usize,
        mode: &mut GateMode<'_>,
        balance: &mut Option<G::Var>,
        z: &mut Option<G::Var>,
    ) -> Result<(G::Var, Vec<GateDecision>)> {
        let out = layer.forward(g, cls, task_id, mode)?;
        for (acc, new) in [(&mut *balance, out.balance), (&mut *z, out.z)] {
            if let Some(v) = new {
                *acc = Some(match acc.take() {
                    Some(a) => g.add(&a, &v)?,
                    None => v,
                });
            }
        }
        Ok((out.y, out.decisions))
    }

    /// `x [B, C_i, L] → logits [B, classes_i]`.
    pub fn forward<E: Element, G: Graph<E>>(
        &self,
        g: &mut G,
        x: &G::Var,
        task_id: usize,
        mode: &mut GateMode<'_>,
    ) -> Result<ForwardOutput<G::Var>> {
        self.task(task_id)?;
        let tokens = self.front.forward(g, x, task_id)?;
        let mut balance = None;
        let mut z = None;
        let mut decisions = Vec::new();

        let placement = self.cfg.moe.as_ref().map(|m| m.placement);
        let (features, head_in) = if placement == Some(MoePlacement::EachBlock) {
            let mut t = tokens;
            for (block, layer) in self.blocks.iter().zip(&self.moe) {
                t = block.forward(g, &t)?;
                let cls = g.select_token(&t, 0)?;
                let (y, d) = self.moe_step(g, layer, &cls, task_id, mode, &mut balance, &mut z)?;
                decisions = d;
                let cls = g.add(&cls, &y)?;
                t = g.set_token(&t, &cls, 0)?;
            }
            let cls = g.select_token(&t, 0)?;
            (cls.clone(), cls)
        } else {
            let t = stack_forward(g, &tokens, &self.blocks)?;
            let cls = g.select_token(&t, 0)?;
            match self.moe.first() {
                Some(layer) => {
                    let (y, d) = self.moe_step(g, layer, &cls, task_id, mode, &mut balance, &mut z)?;
                    decisions = d;
                    (cls, y)
                }
                None => (cls.clone(), cls),
            }
        };
        let logits = self.heads[task_id].forward(g, &head_in)?;
        Ok(ForwardOutput {
            logits,
            features,
            decisions,
            balance,
            z,
        })
    }

    /// Deterministic class-token features `[B, D]` before the experts.
    pub fn export_features<E: Element>(&self, store: &ParamStore<E>, x: &Tensor<E>, task_id: usize) -> Result<Tensor<E>> {
        let mut g = Eval::new(store);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &xv, task_id, &mut GateMode::Eval)?;
        Ok((*out.features).clone())
    }

    /// Deterministic logits `[B, classes_i]`.
    pub fn predict<E: Element>(&self, store: &ParamStore<E>, x: &Tensor<E>, task_id: usize) -> Result<(Tensor<E>, Vec<GateDecision>)> {
        let mut g = Eval::new(store);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &xv, task_id, &mut GateMode::Eval)?;
        Ok(((*out.logits).clone(), out.decisions))
    }
}
