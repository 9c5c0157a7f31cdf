//! Mini-batch training over a [`TrainablePlan`].
//!
//! The trainer owns a private mutable copy of the model (and of any adapter
//! state); the base model is never touched. Batch order is drawn from a
//! seeded generator, so identical options reproduce identical runs.

use crate::error::{Error, Result};
use crate::model::{ForwardAux, Model, PoolMode};
use crate::optim::{Optimizer, OptimizerSettings, Schedule, ScheduleKind};
use crate::peft::{AdapterSpec, Ia3Spec, TrainablePlan};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

/// Token-id rows ready for batching (already padded to a common length).
#[derive(Debug, Clone)]
pub struct TokenizedSet {
    pub inputs: Vec<Vec<u32>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl TokenizedSet {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub optimizer: OptimizerSettings,
    pub schedule: ScheduleKind,
    pub warmup_steps: usize,
    /// Total optimizer steps.
    pub steps: usize,
    pub batch_size: usize,
    /// Micro-batches accumulated per optimizer step.
    pub grad_accum: usize,
    pub seed: u64,
    pub pool: PoolMode,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            optimizer: OptimizerSettings::default(),
            schedule: ScheduleKind::Constant,
            warmup_steps: 0,
            steps: 100,
            batch_size: 16,
            grad_accum: 1,
            seed: 0,
            pool: PoolMode::FirstToken,
        }
    }
}

/// Final model plus adapter state and the loss trace.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub adapters: Vec<AdapterSpec>,
    pub ia3: Vec<Ia3Spec>,
    /// Mean micro-batch loss per optimizer step.
    pub losses: Vec<f64>,
}

impl TrainOutcome {
    pub fn aux(&self) -> ForwardAux<'_> {
        ForwardAux { adapters: &self.adapters, ia3: &self.ia3 }
    }
}

/// Seeded batch index stream: reshuffles the example order at every epoch
/// boundary and hands out fixed-size batches.
struct BatchStream {
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl BatchStream {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        BatchStream { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Names of every trainable tape parameter for a plan, with the mask-derived
/// index lists for masked model parameters.
struct TrainableLayout {
    /// (model parameter name, ascending trainable flat indices)
    masked: Vec<(String, Vec<usize>)>,
    /// Adapter tape-parameter names, fully trainable.
    adapter_keys: Vec<String>,
}

fn plan_layout(plan: &TrainablePlan) -> TrainableLayout {
    let mut masked = Vec::new();
    for (name, shape) in plan.schema().entries() {
        let mask = plan.mask(name).expect("schema-complete plan");
        let idx = mask.trainable_indices(shape);
        if !idx.is_empty() {
            masked.push((name.clone(), idx));
        }
    }
    let mut adapter_keys = Vec::new();
    for a in &plan.adapters {
        adapter_keys.push(format!("{}.lora_a", a.target));
        adapter_keys.push(format!("{}.lora_b", a.target));
    }
    for s in &plan.ia3 {
        adapter_keys.push(format!("layer{}.ia3.l_k", s.layer));
        adapter_keys.push(format!("layer{}.ia3.l_v", s.layer));
        adapter_keys.push(format!("layer{}.ia3.l_ff", s.layer));
    }
    TrainableLayout { masked, adapter_keys }
}

fn adapter_tensor_mut<'a>(
    adapters: &'a mut [AdapterSpec],
    ia3: &'a mut [Ia3Spec],
    key: &str,
) -> &'a mut Tensor {
    if let Some(rest) = key.strip_suffix(".lora_a") {
        return &mut adapters.iter_mut().find(|a| a.target == rest).expect("adapter key").a;
    }
    if let Some(rest) = key.strip_suffix(".lora_b") {
        return &mut adapters.iter_mut().find(|a| a.target == rest).expect("adapter key").b;
    }
    let (layer_part, role) = key.rsplit_once('.').expect("ia3 key");
    let layer: usize = layer_part
        .strip_prefix("layer")
        .and_then(|s| s.strip_suffix(".ia3"))
        .and_then(|s| s.parse().ok())
        .expect("ia3 layer");
    let spec = ia3.iter_mut().find(|s| s.layer == layer).expect("ia3 spec");
    match role {
        "l_k" => &mut spec.l_k,
        "l_v" => &mut spec.l_v,
        "l_ff" => &mut spec.l_ff,
        _ => unreachable!("unknown ia3 role {role}"),
    }
}

/// Train the plan's scalars on cross-entropy; everything else stays frozen.
pub fn train_plan(
    base: &Model,
    plan: &TrainablePlan,
    data: &TokenizedSet,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.labels.len() != data.inputs.len() {
        return Err(Error::Data(format!(
            "{} labels for {} inputs",
            data.labels.len(),
            data.inputs.len()
        )));
    }
    if opts.batch_size == 0 || opts.grad_accum == 0 {
        return Err(Error::Config { field: "batch_size", reason: "must be positive".into() });
    }

    let mut model = base.clone();
    let mut adapters = plan.adapters.clone();
    let mut ia3 = plan.ia3.clone();
    let layout = plan_layout(plan);
    let mut requested: Vec<String> =
        layout.masked.iter().map(|(n, _)| n.clone()).collect();
    requested.extend(layout.adapter_keys.iter().cloned());

    let mut optimizer = Optimizer::new(opts.optimizer);
    let schedule = Schedule {
        kind: opts.schedule,
        base_lr: opts.optimizer.lr,
        warmup_steps: opts.warmup_steps,
        total_steps: opts.steps,
    };
    let mut stream = BatchStream::new(data.len(), opts.seed);
    let mut losses = Vec::with_capacity(opts.steps);

    for step in 0..opts.steps {
        let mut grad_acc: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_acc = 0.0;
        for _ in 0..opts.grad_accum {
            let idx = stream.next_batch(opts.batch_size.min(data.len()));
            let batch: Vec<Vec<u32>> = idx.iter().map(|&i| data.inputs[i].clone()).collect();
            let targets: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let aux = ForwardAux { adapters: &adapters, ia3: &ia3 };
            let mut trace = model.trace_forward(aux, &batch, opts.pool, None)?;
            let loss = trace.tape.cross_entropy(trace.logits, &targets)?;
            loss_acc += trace.tape.value(loss).scalar_value()?;
            if requested.is_empty() {
                continue;
            }
            let names: Vec<&str> = requested.iter().map(|s| s.as_str()).collect();
            let grads = trace.tape.grad(loss, &names)?;
            let scale = 1.0 / opts.grad_accum as f64;
            for (name, g) in grads {
                let scaled = g.scale(scale);
                match grad_acc.get_mut(&name) {
                    Some(acc) => *acc = acc.add(&scaled)?,
                    None => {
                        grad_acc.insert(name, scaled);
                    }
                }
            }
        }
        losses.push(loss_acc / opts.grad_accum as f64);

        if requested.is_empty() {
            continue;
        }
        let lr = schedule.lr_at(step);
        optimizer.begin_step();
        for (name, trainable) in &layout.masked {
            let grad = &grad_acc[name];
            let decay = grad.rank() == 2;
            let grad_data = grad.data().to_vec();
            let tensor = model.param_mut(name)?;
            optimizer.update(name, tensor.data_mut(), &grad_data, trainable, lr, decay);
        }
        for key in &layout.adapter_keys {
            let grad = &grad_acc[key];
            let decay = grad.rank() == 2;
            let grad_data = grad.data().to_vec();
            let tensor = adapter_tensor_mut(&mut adapters, &mut ia3, key);
            let all: Vec<usize> = (0..tensor.numel()).collect();
            optimizer.update(key, tensor.data_mut(), &grad_data, &all, lr, decay);
        }
    }

    Ok(TrainOutcome { model, adapters, ia3, losses })
}

/// Full-parameter training that produces the base model later experiments
/// start from. `steps == 0` returns the input model unchanged.
pub fn pretrain(
    model: &Model,
    data: &TokenizedSet,
    steps: usize,
    lr: f64,
    batch_size: usize,
    seed: u64,
) -> Result<Model> {
    if data.is_empty() {
        return Err(Error::Data("pretraining set is empty".into()));
    }
    if steps == 0 {
        return Ok(model.clone());
    }
    let plan = crate::peft::apply_full(&model.schema());
    let opts = TrainOptions {
        optimizer: OptimizerSettings { lr, ..Default::default() },
        steps,
        batch_size,
        seed,
        ..Default::default()
    };
    Ok(train_plan(model, &plan, data, &opts)?.model)
}

/// Mean cross-entropy of the model on a tokenized set.
pub fn mean_loss(model: &Model, aux: ForwardAux<'_>, data: &TokenizedSet) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("empty evaluation set".into()));
    }
    let mut trace = model.trace_forward(aux, &data.inputs, PoolMode::FirstToken, None)?;
    let loss = trace.tape.cross_entropy(trace.logits, &data.labels)?;
    trace.tape.value(loss).scalar_value()
}

/// Argmax class predictions, batched.
pub fn predict_labels(
    model: &Model,
    aux: ForwardAux<'_>,
    data: &TokenizedSet,
    batch_size: usize,
) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(data.len());
    let contract = crate::model::PooledOutputContract::default();
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch_size).min(data.len());
        let batch: Vec<Vec<u32>> = data.inputs[start..end].to_vec();
        let trace = model.trace_forward(aux, &batch, contract.pool, None)?;
        let logits = trace.tape.value(trace.logits);
        let c = logits.shape()[1];
        for row in logits.data().chunks(c) {
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0);
            out.push(best);
        }
        start = end;
    }
    Ok(out)
}

/// Fraction of matching predictions.
pub fn label_accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(truth).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}
