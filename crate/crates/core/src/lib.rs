// SPDX-License-Identifier: Apache-2.0

//! Operator-level autoscaling and placement simulator for LLM inference.

pub mod autoscaler;
pub mod bundled;
pub mod cli;
pub mod metrics;
pub mod opgraph;
pub mod perfmodel;
pub mod placement;
pub mod queueing;
pub mod scenario;
pub mod workload;
