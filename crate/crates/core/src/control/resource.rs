//! Resource-side protocol engine shared by Q-nodes, EPSs, BSM nodes and
//! switches. Behaviour depends on the node's role in each request.

use std::collections::BTreeMap;

use tracing::debug;

use super::messages::{self, topic_request, Payload, ProbeDirection, ReqTopic};
use super::{Ctx, Timer};
use crate::bus::BusMessage;
use crate::ids::{NodeId, RequestId};
use crate::rwa::RouteAllocation;
use crate::topology::Node;

#[derive(Debug, Clone)]
struct Participation {
    allocation: RouteAllocation,
    is_eps: bool,
    is_qnode: bool,
    rate: f64,
    target: u64,
    records: u64,
    measuring: bool,
}

pub struct Resource {
    pub node: Node,
    active: BTreeMap<RequestId, Participation>,
}

impl Resource {
    pub fn new(node: Node) -> Self {
        Self {
            node,
            active: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &NodeId {
        &self.node.id
    }

    pub fn active_requests(&self) -> impl Iterator<Item = &RequestId> {
        self.active.keys()
    }

    pub(crate) fn load_config(&self, ctx: &mut Ctx) {
        ctx.subscribe("qnet/req/+/#");
        ctx.note(
            "discovery",
            Payload::ConfigLoaded {
                node: self.node.id.clone(),
            },
        );
    }

    pub(crate) fn register(&self, ctx: &mut Ctx) {
        ctx.publish(
            messages::REGISTER,
            "discovery",
            Payload::Register {
                node: self.node.clone(),
            },
        );
    }

    pub(crate) fn on_message(&mut self, msg: &BusMessage, ctx: &mut Ctx) {
        let Some(request) = topic_request(&msg.topic) else {
            return;
        };
        if msg.sender.as_str() != super::SERVER {
            return;
        }
        let corr = msg.correlation_id.clone();
        match &msg.payload {
            Payload::PathsNotify {
                allocation,
                participants,
                qnodes,
            } => {
                if !participants.contains(&self.node.id) {
                    return;
                }
                let is_eps = allocation.eps_nodes().contains(&self.node.id);
                self.active.insert(
                    request,
                    Participation {
                        allocation: allocation.clone(),
                        is_eps,
                        is_qnode: qnodes.contains(&self.node.id),
                        rate: 0.0,
                        target: 0,
                        records: 0,
                        measuring: false,
                    },
                );
            }
            Payload::ProbeRequest => {
                let Some(p) = self.active.get(&request) else {
                    return;
                };
                let legs: Vec<_> = p.allocation.legs().into_iter().cloned().collect();
                for (i, leg) in legs.iter().enumerate() {
                    let direction = if leg.src == self.node.id {
                        ProbeDirection::Forward
                    } else if leg.dst == self.node.id {
                        ProbeDirection::Reverse
                    } else {
                        continue;
                    };
                    let measured_db = ctx.physics.probe_loss_db(leg, direction, ctx.now);
                    ctx.publish(
                        messages::req_topic(request, ReqTopic::Verify),
                        corr.clone(),
                        Payload::ProbeReport {
                            leg: i,
                            direction,
                            measured_db,
                        },
                    );
                }
            }
            Payload::Calibrate { recalibration } => {
                let Some(p) = self.active.get(&request) else {
                    return;
                };
                if p.is_eps {
                    let allocation = p.allocation.clone();
                    if *recalibration {
                        ctx.physics
                            .set_emission(request, &self.node.id, false, ctx.now);
                    }
                    self.attempt_calibration(request, &allocation, 1, *recalibration, ctx);
                } else if !recalibration {
                    ctx.publish(
                        messages::req_topic(request, ReqTopic::Ready),
                        corr,
                        Payload::Ready,
                    );
                }
            }
            Payload::Start {
                rate,
                target_records,
            } => {
                let Some(p) = self.active.get_mut(&request) else {
                    return;
                };
                if p.is_eps {
                    ctx.physics
                        .set_emission(request, &self.node.id, true, ctx.now);
                }
                if p.is_qnode {
                    p.rate = *rate;
                    p.target = *target_records;
                    p.measuring = true;
                    ctx.timer(
                        ctx.cfg.batch_interval_s,
                        Timer::MeasurementBatch { request },
                    );
                }
            }
            Payload::Stop { .. } => {
                if let Some(p) = self.active.remove(&request) {
                    if p.is_eps {
                        ctx.physics
                            .set_emission(request, &self.node.id, false, ctx.now);
                        ctx.physics.release(request);
                    }
                }
            }
            _ => {}
        }
    }

    fn attempt_calibration(
        &mut self,
        request: RequestId,
        allocation: &RouteAllocation,
        attempt: u32,
        recalibration: bool,
        ctx: &mut Ctx,
    ) {
        let outcome = ctx.physics.calibrate(request, allocation, ctx.now);
        ctx.timer(
            outcome.duration_s,
            Timer::CalibrationFinished {
                request,
                converged: outcome.converged,
                attempt,
                recalibration,
            },
        );
    }

    pub(crate) fn on_timer(&mut self, timer: Timer, ctx: &mut Ctx) {
        match timer {
            Timer::CalibrationFinished {
                request,
                converged,
                attempt,
                recalibration,
            } => {
                let Some(p) = self.active.get(&request) else {
                    return;
                };
                let corr = request.to_string();
                if !converged && attempt <= ctx.cfg.calibration_retries {
                    debug!(%request, attempt, "calibration did not converge, retrying");
                    let allocation = p.allocation.clone();
                    self.attempt_calibration(request, &allocation, attempt + 1, recalibration, ctx);
                    return;
                }
                let topic = messages::req_topic(request, ReqTopic::Calibrate);
                if converged && !recalibration {
                    ctx.publish(
                        messages::req_topic(request, ReqTopic::Ready),
                        corr,
                        Payload::Ready,
                    );
                    return;
                }
                if converged {
                    ctx.physics
                        .set_emission(request, &self.node.id, true, ctx.now);
                }
                ctx.publish(
                    topic,
                    corr,
                    Payload::CalibrationDone {
                        converged,
                        attempts: attempt,
                        recalibration,
                    },
                );
            }
            Timer::MeasurementBatch { request } => {
                let Some(p) = self.active.get_mut(&request) else {
                    return;
                };
                if !p.measuring {
                    return;
                }
                let sample = ctx.physics.measure(
                    request,
                    &self.node.id,
                    &p.allocation,
                    p.rate,
                    ctx.cfg.batch_interval_s,
                    ctx.now,
                );
                p.records += sample.records;
                let corr = request.to_string();
                ctx.publish(
                    messages::req_topic(request, ReqTopic::Measurement),
                    corr.clone(),
                    Payload::Measurement { sample },
                );
                if p.records >= p.target {
                    p.measuring = false;
                    let records = p.records;
                    ctx.publish(
                        messages::req_topic(request, ReqTopic::End),
                        corr,
                        Payload::End { records },
                    );
                } else {
                    ctx.timer(
                        ctx.cfg.batch_interval_s,
                        Timer::MeasurementBatch { request },
                    );
                }
            }
            _ => {}
        }
    }
}
