//! Deterministic provisioning: keys, data partitions, initial model.

use std::sync::Arc;

use mixfed_core::learning::{
    dirichlet_partition, evaluate, local_train, plain_fedavg, Dataset, Evaluation, Mlp, ModelVector, PartitionError,
};
use mixfed_core::node::LearnerSetup;
use mixfed_core::onion::NodeKeyPair;
use mixfed_core::seed::derive_seed;
use mixfed_core::NodeId;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::config::ScenarioConfig;

pub fn node_keys(seed: u64, id: NodeId) -> NodeKeyPair {
    let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "keys", u64::from(id.0)));
    NodeKeyPair::generate(id, &mut rng)
}

/// Shared learning material for one scenario: every node's private
/// partition, the common test set and the common initial model.
#[derive(Clone, Debug)]
pub struct LearningTask {
    pub model: Mlp,
    pub init: ModelVector,
    pub partitions: Vec<Dataset>,
    pub test: Arc<Dataset>,
    seed: u64,
}

impl LearningTask {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self, PartitionError> {
        let seed = cfg.transport.seed;
        let l = &cfg.learn;
        let task = cfg.task();
        let slots = cfg.partition_slots();
        let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(seed, "task", 0));
        let centres = task.centres(&mut rng);
        let pool = task.sample(&centres, l.samples_per_node * slots, &mut rng);
        let test = task.sample(&centres, l.test_samples, &mut rng);
        let partitions = dirichlet_partition(&pool, slots, l.alpha_dirichlet, &mut rng)?;
        let model = Mlp {
            dim: l.dim,
            hidden: l.hidden,
            classes: l.classes,
        };
        let init = model.init(&mut ChaCha20Rng::seed_from_u64(derive_seed(seed, "init", 0)));
        Ok(LearningTask {
            model,
            init,
            partitions,
            test: Arc::new(test),
            seed,
        })
    }

    pub fn learner_seed(&self, id: NodeId) -> u64 {
        derive_seed(self.seed, "learner", u64::from(id.0))
    }

    pub fn setup(&self, id: NodeId) -> LearnerSetup {
        LearnerSetup {
            model: self.model,
            init: self.init.clone(),
            train: self.partitions[id.0 as usize % self.partitions.len()].clone(),
            test: Arc::clone(&self.test),
            seed: self.learner_seed(id),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BaselineRound {
    pub round: u32,
    pub mean_local_accuracy: f64,
    pub accuracy: f64,
    pub loss: f64,
}

/// Plain FedAvg with no network: every node trains from the global model
/// with the same seeds and partitions as in a scenario, and the global
/// model is the coordinatewise mean. Returns one entry per round.
pub fn plain_fedavg_baseline(cfg: &ScenarioConfig, task: &LearningTask) -> Vec<BaselineRound> {
    let l = &cfg.learn;
    let ids: Vec<NodeId> = cfg.node_ids().collect();
    let mut rngs: Vec<ChaCha20Rng> = ids
        .iter()
        .map(|&id| ChaCha20Rng::seed_from_u64(task.learner_seed(id)))
        .collect();
    let mut global = task.init.clone();
    let mut out = Vec::new();
    for round in 0..l.rounds {
        let mut locals = Vec::with_capacity(ids.len());
        let mut local_acc = 0.0;
        for (id, rng) in ids.iter().zip(rngs.iter_mut()) {
            let data = &task.partitions[id.0 as usize];
            let mut w = local_train(&task.model, &global, data, l.tau, l.eta, l.batch_size, rng);
            w.quantize_f32();
            local_acc += evaluate(&task.model, &w, &task.test).accuracy;
            locals.push(w);
        }
        let refs: Vec<&ModelVector> = locals.iter().collect();
        global = plain_fedavg(&refs).expect("at least one node");
        let Evaluation { accuracy, loss } = evaluate(&task.model, &global, &task.test);
        out.push(BaselineRound {
            round: round + 1,
            mean_local_accuracy: local_acc / ids.len() as f64,
            accuracy,
            loss,
        });
    }
    out
}
