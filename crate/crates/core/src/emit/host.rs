use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EmitError, EMIT_FORMAT_VERSION};
use crate::costmodel::ELEM_BYTES;
use crate::loopir::{structural_check, Bindings};
use crate::plan::{ExecutionPlan, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BufferRole {
    Input,
    Output,
    Weights,
    Intermediate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostBuffer {
    pub name: String,
    pub shape: Vec<usize>,
    pub bytes: usize,
    pub role: BufferRole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostQueue {
    pub queue: usize,
    pub kernels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostInvocation {
    pub kernel: String,
    pub layer: String,
    /// `None` for autorun kernels, which the host never launches.
    pub queue: Option<usize>,
    pub bindings: Bindings,
    /// Kernel argument → global buffer.
    pub args: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostChannel {
    pub name: String,
    pub depth: usize,
    pub depth_bytes: usize,
    pub producer: String,
    pub consumer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HostPlan {
    pub format_version: u32,
    pub network: String,
    pub mode: Option<Mode>,
    pub input_buffer: String,
    pub output_buffer: String,
    pub buffers: Vec<HostBuffer>,
    pub queues: Vec<HostQueue>,
    pub autorun_kernels: Vec<String>,
    /// Launch order. Folded: sequential on the one queue. Pipelined: all
    /// launched together, each on its own queue.
    pub invocations: Vec<HostInvocation>,
    pub channels: Vec<HostChannel>,
    pub synchronization: String,
}

/// Buffers, queues, launch order and channels the host needs. An empty plan
/// yields an empty document.
pub fn emit_host_plan(plan: &ExecutionPlan) -> Result<HostPlan, EmitError> {
    let mut doc = HostPlan {
        format_version: EMIT_FORMAT_VERSION,
        network: plan.network.clone(),
        mode: None,
        input_buffer: String::new(),
        output_buffer: String::new(),
        buffers: Vec::new(),
        queues: Vec::new(),
        autorun_kernels: Vec::new(),
        invocations: Vec::new(),
        channels: Vec::new(),
        synchronization: String::new(),
    };
    if plan.kernels.is_empty() {
        return Ok(doc);
    }
    let v = structural_check(plan);
    if !v.is_empty() {
        return Err(EmitError::InvalidPlan(v.iter().map(|v| v.to_string()).collect()));
    }
    doc.mode = Some(plan.mode);
    doc.input_buffer = plan.input_tensor.clone();
    doc.output_buffer = plan.output_tensor.clone();
    let tensors = plan.global_tensors().map_err(|e| EmitError::InvalidPlan(vec![e.to_string()]))?;
    doc.buffers = tensors
        .into_iter()
        .map(|(name, shape)| {
            let role = if name == plan.input_tensor {
                BufferRole::Input
            } else if name == plan.output_tensor {
                BufferRole::Output
            } else if name.starts_with("w:") {
                BufferRole::Weights
            } else {
                BufferRole::Intermediate
            };
            let bytes = shape.iter().product::<usize>() * ELEM_BYTES;
            HostBuffer { name, shape, bytes, role }
        })
        .collect();
    let mut by_queue: BTreeMap<usize, Vec<String>> = BTreeMap::new();
    for k in &plan.kernels {
        if let Some(&q) = plan.queues.get(&k.id) {
            by_queue.entry(q).or_default().push(k.id.clone());
        }
    }
    doc.queues = by_queue.into_iter().map(|(queue, kernels)| HostQueue { queue, kernels }).collect();
    doc.autorun_kernels = plan.kernels.iter().filter(|k| k.autorun).map(|k| k.id.clone()).collect();
    doc.invocations = plan
        .invocations
        .iter()
        .map(|i| HostInvocation {
            kernel: i.kernel.clone(),
            layer: i.layer.clone(),
            queue: plan.queues.get(&i.kernel).copied(),
            bindings: i.bindings.clone(),
            args: i.buffers.clone(),
        })
        .collect();
    doc.channels = plan
        .channels
        .iter()
        .map(|c| HostChannel {
            name: c.name.clone(),
            depth: c.depth,
            depth_bytes: c.depth * ELEM_BYTES,
            producer: c.producer.clone(),
            consumer: c.consumer.clone(),
        })
        .collect();
    doc.synchronization = match plan.mode {
        Mode::Folded => "one in-order queue; each launch waits for the previous one".into(),
        Mode::Pipelined => {
            "kernels launch concurrently, one queue each; they synchronize through channels, and the host waits on every queue before reading the output buffer".into()
        }
    };
    Ok(doc)
}
