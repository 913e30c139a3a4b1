use std::collections::{BTreeMap, VecDeque};

use super::interp::{ChannelIo, Machine, NoChannels, Program, Status};
use super::{structural_check, Access, ExecStats, IrError, MemSpace, Tensor};
use crate::plan::{ExecutionPlan, Invocation, Mode};

/// Default instruction budget for plan interpretation.
pub const DEFAULT_MAX_STEPS: u64 = 20_000_000_000;

#[derive(Debug, Clone)]
pub struct PlanOutput {
    pub output: Tensor,
    pub stats: ExecStats,
    /// Every global tensor after execution.
    pub tensors: BTreeMap<String, Tensor>,
}

struct Fifos {
    queues: Vec<VecDeque<f32>>,
    depths: Vec<usize>,
}

impl ChannelIo for Fifos {
    fn try_read(&mut self, chan: usize) -> Option<f32> {
        self.queues[chan].pop_front()
    }

    fn try_write(&mut self, chan: usize, v: f32) -> bool {
        if self.queues[chan].len() >= self.depths[chan] {
            return false;
        }
        self.queues[chan].push_back(v);
        true
    }
}

fn instantiate(
    plan: &ExecutionPlan,
    inv: &Invocation,
    chans: &BTreeMap<String, usize>,
    store: &BTreeMap<String, Tensor>,
) -> Result<Machine, IrError> {
    let k = plan.kernel(&inv.kernel).ok_or_else(|| IrError::InvalidPlan(vec![format!(
        "unknown kernel '{}'",
        inv.kernel
    )]))?;
    let prog = Program::compile(k, &inv.bindings, chans, plan.of_enabled)?;
    let mut m = Machine::new(prog, plan.of_enabled);
    for b in k.global_buffers() {
        let tensor = &inv.buffers[&b.name];
        match store.get(tensor) {
            Some(t) if b.access != Access::Write => m.bind(&b.name, t)?,
            None if b.access == Access::Read => return Err(IrError::MissingTensor(tensor.clone())),
            _ => {}
        }
    }
    Ok(m)
}

fn collect(
    plan: &ExecutionPlan,
    inv: &Invocation,
    m: &Machine,
    store: &mut BTreeMap<String, Tensor>,
) {
    let k = plan.kernel(&inv.kernel).expect("checked");
    for b in &k.buffers {
        if b.space == MemSpace::Global && b.access != Access::Read {
            store.insert(inv.buffers[&b.name].clone(), m.tensor(&b.name).expect("declared"));
        }
    }
}

/// Executes a plan. Pipelined plans co-simulate all kernels round-robin over
/// bounded FIFOs; folded plans run invocations in order through global
/// tensors. `weights` holds every `w:*` tensor.
pub fn interpret_plan(
    plan: &ExecutionPlan,
    input: &Tensor,
    weights: &BTreeMap<String, Tensor>,
    max_steps: u64,
) -> Result<PlanOutput, IrError> {
    let violations = structural_check(plan);
    if !violations.is_empty() {
        return Err(IrError::InvalidPlan(violations.iter().map(|v| v.to_string()).collect()));
    }
    let mut store = weights.clone();
    store.insert(plan.input_tensor.clone(), input.clone());
    let mut budget = max_steps;
    let mut stats = ExecStats::default();
    let exhausted = |budget: u64| max_steps - budget;

    match plan.mode {
        Mode::Folded => {
            let none = BTreeMap::new();
            for inv in &plan.invocations {
                let mut m = instantiate(plan, inv, &none, &store)?;
                match m.run(&mut NoChannels, &mut budget) {
                    Ok(Status::Done) => {}
                    Ok(Status::Blocked) => {
                        return Err(IrError::DeadlockDetected { blocked: vec![inv.kernel.clone()] })
                    }
                    Err(IrError::StepBudgetExceeded(_)) => {
                        return Err(IrError::StepBudgetExceeded(exhausted(budget)))
                    }
                    Err(e) => return Err(e),
                }
                stats.add(&m.stats);
                collect(plan, inv, &m, &mut store);
            }
        }
        Mode::Pipelined => {
            let chans: BTreeMap<String, usize> =
                plan.channels.iter().enumerate().map(|(i, c)| (c.name.clone(), i)).collect();
            let mut fifos = Fifos {
                queues: vec![VecDeque::new(); plan.channels.len()],
                depths: plan.channels.iter().map(|c| c.depth).collect(),
            };
            let mut machines = plan
                .invocations
                .iter()
                .map(|inv| instantiate(plan, inv, &chans, &store))
                .collect::<Result<Vec<_>, _>>()?;
            loop {
                let mut progress = false;
                for m in machines.iter_mut().filter(|m| !m.is_done()) {
                    let before = m.stats.steps;
                    match m.run(&mut fifos, &mut budget) {
                        Ok(_) => {}
                        Err(IrError::StepBudgetExceeded(_)) => {
                            return Err(IrError::StepBudgetExceeded(exhausted(budget)))
                        }
                        Err(e) => return Err(e),
                    }
                    progress |= m.stats.steps != before || m.is_done();
                }
                if machines.iter().all(Machine::is_done) {
                    break;
                }
                if !progress {
                    let blocked = machines
                        .iter()
                        .filter(|m| !m.is_done())
                        .map(|m| m.prog.kernel.clone())
                        .collect();
                    return Err(IrError::DeadlockDetected { blocked });
                }
            }
            for (inv, m) in plan.invocations.iter().zip(&machines) {
                stats.add(&m.stats);
                collect(plan, inv, m, &mut store);
            }
        }
    }
    let output = store
        .get(&plan.output_tensor)
        .cloned()
        .ok_or_else(|| IrError::MissingTensor(plan.output_tensor.clone()))?;
    Ok(PlanOutput { output, stats, tensors: store })
}
