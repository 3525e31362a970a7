//! Model cascade for planning calls.
//!
//! Each step starts at tier 0. A tier gets up to `max_format_retries`
//! attempts with the same prompt; exhausting them moves up with
//! [`EscalationReason::FormatFailure`]. A well-formed response whose action
//! would complete `r` identical consecutive actions is discarded and the next
//! tier is asked instead. Calls to the top (expert) tier spend lifelines,
//! which are shared with explicit expert requests.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{ActionSpec, REQUEST_EXPERT};
use crate::gateway::{CompletionRequest, GatewayError, ModelDescriptor, ModelGateway, UsageTag};
use crate::grammar::{parse_planner_response, render_expert_prompt, ActionKey, ParseFailureKind, PlannerResponse};
use crate::ledger::{CostLedger, EventId, UsagePurpose};
use crate::profiles;

pub const DEFAULT_REPEAT_THRESHOLD: u32 = 3;
pub const DEFAULT_LIFELINE_CAP: u32 = 5;

/// When a repeated proposal counts as a repeat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepeatTrigger {
    /// The candidate would be the r-th identical action in a row.
    #[default]
    AtR,
    /// The candidate would be the (r+1)-th, i.e. r already happened.
    AfterR,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Ascending by input price. The last tier is the expert tier.
    pub tiers: Vec<ModelDescriptor>,
    pub repeat_threshold: u32,
    pub lifeline_cap: u32,
    /// Whether the last tier is an expert tier that spends lifelines and
    /// whether the planner may request it directly.
    pub expert_enabled: bool,
    #[serde(default)]
    pub repeat_trigger: RepeatTrigger,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CascadeConfigError {
    #[error("cascade needs at least one tier")]
    NoTiers,
    #[error("tier {index} ({id}) is cheaper per input token than the tier below it")]
    TiersNotAscending { index: usize, id: String },
    #[error("duplicate tier model {0}")]
    DuplicateTier(String),
    #[error("repeat_threshold must be >= 2, got {0}")]
    RepeatThreshold(u32),
    #[error("the expert tier needs at least two tiers")]
    ExpertNeedsTwoTiers,
    #[error("tier {id}: {detail}")]
    InvalidTier { id: String, detail: String },
}

impl CascadeConfig {
    /// Default r and l; the expert tier is enabled when there is
    /// more than one tier.
    pub fn new(tiers: Vec<ModelDescriptor>) -> Self {
        let expert_enabled = tiers.len() >= 2;
        let mut config = CascadeConfig {
            tiers,
            repeat_threshold: DEFAULT_REPEAT_THRESHOLD,
            lifeline_cap: DEFAULT_LIFELINE_CAP,
            expert_enabled,
            repeat_trigger: RepeatTrigger::AtR,
        };
        config.assign_ranks();
        config
    }

    pub fn assign_ranks(&mut self) {
        for (i, t) in self.tiers.iter_mut().enumerate() {
            t.tier_rank = i;
        }
    }

    pub fn validate(&self) -> Result<(), CascadeConfigError> {
        if self.tiers.is_empty() {
            return Err(CascadeConfigError::NoTiers);
        }
        for (i, t) in self.tiers.iter().enumerate() {
            t.validate().map_err(|e| CascadeConfigError::InvalidTier { id: t.id.clone(), detail: e.to_string() })?;
            if self.tiers[..i].iter().any(|o| o.id == t.id) {
                return Err(CascadeConfigError::DuplicateTier(t.id.clone()));
            }
            if i > 0 && t.price_per_input_token < self.tiers[i - 1].price_per_input_token {
                return Err(CascadeConfigError::TiersNotAscending { index: i, id: t.id.clone() });
            }
        }
        if self.repeat_threshold < 2 {
            return Err(CascadeConfigError::RepeatThreshold(self.repeat_threshold));
        }
        if self.expert_enabled && self.tiers.len() < 2 {
            return Err(CascadeConfigError::ExpertNeedsTwoTiers);
        }
        Ok(())
    }

    pub fn expert_tier_index(&self) -> Option<usize> {
        self.expert_enabled.then(|| self.tiers.len() - 1)
    }

    pub fn expert_tier(&self) -> Option<&ModelDescriptor> {
        self.expert_tier_index().map(|i| &self.tiers[i])
    }

    fn is_expert_tier(&self, tier: usize) -> bool {
        self.expert_tier_index() == Some(tier)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EscalationReason {
    FormatFailure,
    RepeatedAction,
    ExpertRequested,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttemptOutcome {
    Accepted,
    FormatFailure { failure: ParseFailureKind, detail: String },
    RepeatedAction { action: String },
    TransportError { detail: String },
}

/// One planning call made during a step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub tier: usize,
    pub model_id: String,
    /// 1-based attempt number at this tier within the step.
    pub attempt: u32,
    pub purpose: UsagePurpose,
    /// Why this tier was entered; set on the first attempt after a
    /// transition.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub escalation: Option<EscalationReason>,
    pub outcome: AttemptOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub usage_event_id: Option<EventId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeState {
    pub lifelines_used: u32,
    recent_actions: VecDeque<ActionKey>,
    window: usize,
}

impl CascadeState {
    pub fn new(config: &CascadeConfig) -> Self {
        let window = config.repeat_threshold.max(2) as usize + 1;
        CascadeState { lifelines_used: 0, recent_actions: VecDeque::with_capacity(window), window }
    }

    pub fn recent_actions(&self) -> impl Iterator<Item = &ActionKey> {
        self.recent_actions.iter()
    }

    /// Records an action that was actually dispatched.
    pub fn record_action(&mut self, key: ActionKey) {
        if self.recent_actions.len() == self.window {
            self.recent_actions.pop_front();
        }
        self.recent_actions.push_back(key);
    }

    pub fn lifelines_left(&self, config: &CascadeConfig) -> u32 {
        config.lifeline_cap.saturating_sub(self.lifelines_used)
    }
}

/// True iff the last `r - 1` actions all equal `candidate`.
pub fn detect_repeat<'a>(
    recent: impl DoubleEndedIterator<Item = &'a ActionKey>,
    candidate: &ActionKey,
    r: u32,
) -> bool {
    let need = r.saturating_sub(1) as usize;
    if need == 0 {
        return true;
    }
    let mut seen = 0;
    for key in recent.rev().take(need) {
        if key != candidate {
            return false;
        }
        seen += 1;
    }
    seen == need
}

fn is_repeat(state: &CascadeState, config: &CascadeConfig, candidate: &ActionKey) -> bool {
    let r = match config.repeat_trigger {
        RepeatTrigger::AtR => config.repeat_threshold,
        RepeatTrigger::AfterR => config.repeat_threshold + 1,
    };
    detect_repeat(state.recent_actions.iter(), candidate, r)
}

/// The base actions, plus the expert request while lifelines remain.
pub fn available_planner_actions(state: &CascadeState, config: &CascadeConfig, base: &[ActionSpec]) -> Vec<ActionSpec> {
    let mut actions = base.to_vec();
    if config.expert_enabled && state.lifelines_used < config.lifeline_cap {
        actions.push(crate::environment::expert_action());
    }
    actions
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error("every permitted tier failed{}", if *.lifeline_cap_hit { " (lifeline cap reached)" } else { "" })]
    Exhausted { lifeline_cap_hit: bool, attempts: Vec<Attempt> },
    #[error("no lifelines left ({used} of {cap} used)")]
    LifelinesExhausted { used: u32, cap: u32 },
    #[error("model call failed: {error}")]
    Fatal { error: GatewayError, attempts: Vec<Attempt> },
}

impl CascadeError {
    pub fn attempts(&self) -> &[Attempt] {
        match self {
            CascadeError::Exhausted { attempts, .. } | CascadeError::Fatal { attempts, .. } => attempts,
            CascadeError::LifelinesExhausted { .. } => &[],
        }
    }
}

/// The accepted response of a step and how it was obtained.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub response: PlannerResponse,
    pub tier: usize,
    pub model_id: String,
    pub attempts: Vec<Attempt>,
}

/// Model access for planning calls within one step.
pub struct PlanningCalls<'a> {
    pub gateway: &'a ModelGateway,
    pub ledger: &'a mut CostLedger,
    pub run_id: &'a str,
    pub step_index: usize,
    pub temperature: f64,
}

enum TierResult {
    Accepted(PlannerResponse),
    Escalate(EscalationReason),
    CapHit,
}

struct TierCall<'p> {
    tier: usize,
    profile: &'p str,
    prompt: &'p str,
    purpose: UsagePurpose,
    allowed: &'p [&'p str],
    check_repeat: bool,
    entered_by: Option<EscalationReason>,
}

fn run_tier(
    call: &TierCall<'_>,
    state: &mut CascadeState,
    config: &CascadeConfig,
    calls: &mut PlanningCalls<'_>,
    attempts: &mut Vec<Attempt>,
) -> Result<TierResult, GatewayError> {
    let model = &config.tiers[call.tier];
    let spends_lifelines = config.is_expert_tier(call.tier);
    let request = CompletionRequest::new(call.profile, call.prompt, calls.temperature);
    let tag = UsageTag { run_id: calls.run_id.to_string(), step_index: calls.step_index, purpose: call.purpose };

    for n in 1..=model.max_format_retries {
        if spends_lifelines && state.lifelines_used >= config.lifeline_cap {
            return Ok(TierResult::CapHit);
        }
        let mut attempt = Attempt {
            tier: call.tier,
            model_id: model.id.clone(),
            attempt: n,
            purpose: call.purpose,
            escalation: if n == 1 { call.entered_by } else { None },
            outcome: AttemptOutcome::Accepted,
            usage_event_id: None,
        };
        let text = match calls.gateway.complete(model, &request, &tag, calls.ledger) {
            Ok((result, id)) => {
                attempt.usage_event_id = Some(id);
                if spends_lifelines {
                    state.lifelines_used += 1;
                }
                result.text
            }
            Err(e) if e.is_fatal() => {
                attempt.outcome = AttemptOutcome::TransportError { detail: e.to_string() };
                attempts.push(attempt);
                return Err(e);
            }
            Err(e) => {
                attempt.outcome = AttemptOutcome::TransportError { detail: e.to_string() };
                attempts.push(attempt);
                continue;
            }
        };
        match parse_planner_response(&text, call.allowed) {
            Err(failure) => {
                attempt.outcome = AttemptOutcome::FormatFailure { failure: failure.kind, detail: failure.detail };
                attempts.push(attempt);
            }
            Ok(response) => {
                if call.check_repeat && is_repeat(state, config, &response.action_key()) {
                    attempt.outcome = AttemptOutcome::RepeatedAction { action: response.action_name.clone() };
                    attempts.push(attempt);
                    return Ok(TierResult::Escalate(EscalationReason::RepeatedAction));
                }
                attempts.push(attempt);
                return Ok(TierResult::Accepted(response));
            }
        }
    }
    Ok(TierResult::Escalate(EscalationReason::FormatFailure))
}

/// Gets one accepted planner response for the current step.
///
/// `allowed` are the action names offered in `prompt`. The repeat rule is
/// not applied at the top tier, whose answer is taken as is.
pub fn plan_next(
    prompt: &str,
    state: &mut CascadeState,
    config: &CascadeConfig,
    allowed: &[&str],
    calls: &mut PlanningCalls<'_>,
) -> Result<Plan, CascadeError> {
    let mut attempts = Vec::new();
    let mut entered_by = None;
    let top = config.tiers.len() - 1;
    for tier in 0..config.tiers.len() {
        let call = TierCall {
            tier,
            profile: profiles::DEFAULT_PLANNER,
            prompt,
            purpose: UsagePurpose::Planning,
            allowed,
            check_repeat: tier < top,
            entered_by,
        };
        match run_tier(&call, state, config, calls, &mut attempts) {
            Ok(TierResult::Accepted(response)) => {
                return Ok(Plan { response, tier, model_id: config.tiers[tier].id.clone(), attempts })
            }
            Ok(TierResult::Escalate(reason)) => entered_by = Some(reason),
            Ok(TierResult::CapHit) => return Err(CascadeError::Exhausted { lifeline_cap_hit: true, attempts }),
            Err(error) => return Err(CascadeError::Fatal { error, attempts }),
        }
    }
    Err(CascadeError::Exhausted { lifeline_cap_hit: false, attempts })
}

/// Asks the expert tier, under the planning-expert persona, to decide the
/// current step. The expert cannot itself request an expert.
pub fn request_expert(
    question: &str,
    base_prompt: &str,
    state: &mut CascadeState,
    config: &CascadeConfig,
    allowed: &[&str],
    calls: &mut PlanningCalls<'_>,
) -> Result<Plan, CascadeError> {
    let tier =
        config.expert_tier_index().ok_or(CascadeError::LifelinesExhausted { used: state.lifelines_used, cap: 0 })?;
    if state.lifelines_used >= config.lifeline_cap {
        return Err(CascadeError::LifelinesExhausted { used: state.lifelines_used, cap: config.lifeline_cap });
    }
    let allowed: Vec<&str> = allowed.iter().copied().filter(|a| *a != REQUEST_EXPERT).collect();
    let prompt = render_expert_prompt(base_prompt, question);
    let call = TierCall {
        tier,
        profile: profiles::PLANNING_EXPERT,
        prompt: &prompt,
        purpose: UsagePurpose::Expert,
        allowed: &allowed,
        check_repeat: false,
        entered_by: Some(EscalationReason::ExpertRequested),
    };
    let mut attempts = Vec::new();
    match run_tier(&call, state, config, calls, &mut attempts) {
        Ok(TierResult::Accepted(response)) => {
            Ok(Plan { response, tier, model_id: config.tiers[tier].id.clone(), attempts })
        }
        Ok(TierResult::Escalate(_)) => Err(CascadeError::Exhausted { lifeline_cap_hit: false, attempts }),
        Ok(TierResult::CapHit) => Err(CascadeError::Exhausted { lifeline_cap_hit: true, attempts }),
        Err(error) => Err(CascadeError::Fatal { error, attempts }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{base_actions, LIST_FILES};
    use crate::gateway::ScriptedBackend;
    use crate::money::Price;
    use serde_json::json;

    const BAD: &str = "I am not following the format.";

    fn good(action: &str, input: serde_json::Value) -> String {
        format!(
            "Reflection: r\nResearch Plan and Status: p\nFact Check: f\nThought: t\nAction: {action}\nAction Input: {input}\n"
        )
    }

    fn list(dir: &str) -> String {
        good(LIST_FILES, json!({"dir_path": dir}))
    }

    struct Rig {
        config: CascadeConfig,
        gateway: ModelGateway,
        ledger: CostLedger,
        state: CascadeState,
    }

    impl Rig {
        fn new(scripts: Vec<(&str, u32, Vec<String>)>) -> Self {
            let tiers: Vec<_> = scripts
                .into_iter()
                .enumerate()
                .map(|(i, (id, m, replies))| {
                    ModelDescriptor::scripted(id, m, replies).with_prices(
                        Price::per_million((i as i64 * 10).into()),
                        Price::per_million((i as i64 * 30).into()),
                    )
                })
                .collect();
            let config = CascadeConfig::new(tiers);
            config.validate().unwrap();
            let gateway = ModelGateway::from_models(&config.tiers);
            let state = CascadeState::new(&config);
            Rig { config, gateway, ledger: CostLedger::new(), state }
        }

        fn names(&self) -> Vec<String> {
            available_planner_actions(&self.state, &self.config, &base_actions()).into_iter().map(|a| a.name).collect()
        }

        fn plan(&mut self, step: usize) -> Result<Plan, CascadeError> {
            let names = self.names();
            let allowed: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut calls = PlanningCalls {
                gateway: &self.gateway,
                ledger: &mut self.ledger,
                run_id: "r",
                step_index: step,
                temperature: 0.2,
            };
            plan_next("prompt", &mut self.state, &self.config, &allowed, &mut calls)
        }

        fn expert(&mut self, step: usize) -> Result<Plan, CascadeError> {
            let names = self.names();
            let allowed: Vec<&str> = names.iter().map(String::as_str).collect();
            let mut calls = PlanningCalls {
                gateway: &self.gateway,
                ledger: &mut self.ledger,
                run_id: "r",
                step_index: step,
                temperature: 0.2,
            };
            request_expert("help", "prompt", &mut self.state, &self.config, &allowed, &mut calls)
        }
    }

    fn key(dir: &str) -> ActionKey {
        ActionKey::new(LIST_FILES, json!({"dir_path": dir}).as_object().unwrap())
    }

    #[test]
    fn detect_repeat_cases() {
        let a = key(".");
        let b = key("data");
        assert!(detect_repeat([a.clone(), a.clone()].iter(), &a, 3));
        assert!(!detect_repeat([a.clone(), b.clone()].iter(), &a, 3));
        assert!(!detect_repeat([b.clone(), a.clone()].iter(), &b, 3));
        assert!(!detect_repeat([a.clone()].iter(), &a, 3));
        assert!(!detect_repeat(std::iter::empty(), &a, 3));
        assert!(detect_repeat([b.clone(), a.clone(), a.clone()].iter(), &a, 3));
    }

    #[test]
    fn happy_path_stays_on_tier_zero() {
        let mut rig = Rig::new(vec![("cheap", 3, vec![list(".")]), ("gpt4", 1, vec![])]);
        let plan = rig.plan(0).unwrap();
        assert_eq!(plan.tier, 0);
        assert_eq!(plan.attempts.len(), 1);
        assert_eq!(rig.state.lifelines_used, 0);
    }

    #[test]
    fn format_failures_escalate_and_spend_a_lifeline() {
        let mut rig =
            Rig::new(vec![("cheap", 3, vec![BAD.into(), BAD.into(), BAD.into()]), ("gpt4", 1, vec![list(".")])]);
        let plan = rig.plan(0).unwrap();
        assert_eq!(plan.tier, 1);
        let tiers: Vec<_> = plan.attempts.iter().map(|a| (a.tier, a.attempt)).collect();
        assert_eq!(tiers, vec![(0, 1), (0, 2), (0, 3), (1, 1)]);
        assert_eq!(plan.attempts[3].escalation, Some(EscalationReason::FormatFailure));
        assert_eq!(rig.ledger.len(), 4);
        assert_eq!(rig.state.lifelines_used, 1);
    }

    #[test]
    fn repeated_proposal_is_discarded_and_escalated() {
        let mut rig = Rig::new(vec![("cheap", 3, vec![list(".")]), ("gpt4", 1, vec![list("data")])]);
        rig.state.record_action(key("."));
        rig.state.record_action(key("."));
        let plan = rig.plan(2).unwrap();
        assert_eq!(plan.tier, 1);
        assert_eq!(plan.attempts[0].outcome, AttemptOutcome::RepeatedAction { action: LIST_FILES.into() });
        assert_eq!(plan.attempts[1].escalation, Some(EscalationReason::RepeatedAction));
        assert_eq!(plan.response.action_input["dir_path"], "data");
    }

    #[test]
    fn after_r_trigger_waits_one_more() {
        let mut rig = Rig::new(vec![("cheap", 3, vec![list(".")]), ("gpt4", 1, vec![])]);
        rig.config.repeat_trigger = RepeatTrigger::AfterR;
        rig.state.record_action(key("."));
        rig.state.record_action(key("."));
        assert_eq!(rig.plan(2).unwrap().tier, 0);
    }

    #[test]
    fn top_tier_repeat_is_accepted() {
        let mut rig = Rig::new(vec![("cheap", 3, vec![list(".")]), ("gpt4", 1, vec![list(".")])]);
        rig.state.record_action(key("."));
        rig.state.record_action(key("."));
        let plan = rig.plan(2).unwrap();
        assert_eq!(plan.tier, 1);
        assert_eq!(plan.response.action_key(), key("."));
    }

    #[test]
    fn expert_actions_follow_lifelines() {
        let mut rig = Rig::new(vec![("cheap", 3, vec![]), ("gpt4", 1, vec![])]);
        assert!(rig.names().iter().any(|n| n == REQUEST_EXPERT));
        rig.state.lifelines_used = 5;
        assert!(!rig.names().iter().any(|n| n == REQUEST_EXPERT));
        rig.config.lifeline_cap = 0;
        rig.state.lifelines_used = 0;
        assert!(!rig.names().iter().any(|n| n == REQUEST_EXPERT));
    }

    #[test]
    fn request_expert_spends_the_last_lifeline() {
        let mut rig = Rig::new(vec![("cheap", 3, vec![]), ("gpt4", 1, vec![list(".")])]);
        rig.state.lifelines_used = 4;
        let plan = rig.expert(0).unwrap();
        assert_eq!(rig.state.lifelines_used, 5);
        assert_eq!(plan.attempts[0].purpose, UsagePurpose::Expert);
        assert_eq!(rig.ledger.events()[0].profile, profiles::PLANNING_EXPERT);
        assert_eq!(rig.expert(1), Err(CascadeError::LifelinesExhausted { used: 5, cap: 5 }));
    }

    #[test]
    fn malformed_expert_reply_exhausts_the_step() {
        let mut rig = Rig::new(vec![("cheap", 3, vec![]), ("gpt4", 1, vec![BAD.into()])]);
        assert!(matches!(rig.expert(0), Err(CascadeError::Exhausted { lifeline_cap_hit: false, .. })));
    }

    #[test]
    fn expert_cannot_request_expert() {
        let mut rig =
            Rig::new(vec![("cheap", 3, vec![]), ("gpt4", 1, vec![good(REQUEST_EXPERT, json!({"question": "?"}))])]);
        assert!(matches!(rig.expert(0), Err(CascadeError::Exhausted { .. })));
    }

    #[test]
    fn escalation_blocked_at_cap() {
        let mut rig =
            Rig::new(vec![("cheap", 3, vec![BAD.into(), BAD.into(), BAD.into()]), ("gpt4", 1, vec![list(".")])]);
        rig.state.lifelines_used = 5;
        match rig.plan(0) {
            Err(CascadeError::Exhausted { lifeline_cap_hit: true, attempts }) => assert_eq!(attempts.len(), 3),
            other => panic!("{other:?}"),
        }
        assert_eq!(rig.gateway.scripted("gpt4").unwrap().remaining(), 1);
    }

    #[test]
    fn single_tier_without_expert() {
        let mut rig = Rig::new(vec![("only", 2, vec![BAD.into(), BAD.into()])]);
        assert!(!rig.config.expert_enabled);
        assert!(matches!(rig.plan(0), Err(CascadeError::Exhausted { lifeline_cap_hit: false, .. })));
        assert_eq!(rig.state.lifelines_used, 0);
    }

    #[test]
    fn transient_errors_count_as_attempts() {
        let mut rig = Rig::new(vec![("cheap", 2, vec![]), ("gpt4", 1, vec![list(".")])]);
        rig.gateway.register("cheap", std::sync::Arc::new(Flaky));
        let plan = rig.plan(0).unwrap();
        assert_eq!(plan.tier, 1);
        assert!(matches!(plan.attempts[0].outcome, AttemptOutcome::TransportError { .. }));
        assert_eq!(rig.ledger.len(), 1);
        assert_eq!(rig.state.lifelines_used, 1);
    }

    struct Flaky;
    impl crate::gateway::CompletionBackend for Flaky {
        fn complete(
            &self,
            _: &ModelDescriptor,
            _: &CompletionRequest,
        ) -> Result<crate::gateway::CompletionResult, GatewayError> {
            Err(GatewayError::Transport("reset".into()))
        }
    }

    #[test]
    fn fatal_error_stops_the_step() {
        let mut rig = Rig::new(vec![("cheap", 3, vec![]), ("gpt4", 1, vec![])]);
        assert!(matches!(rig.plan(0), Err(CascadeError::Fatal { error: GatewayError::ScriptExhausted { .. }, .. })));
    }

    #[test]
    fn validation() {
        let cheap = ModelDescriptor::scripted("a", 3, vec![]);
        let dear = ModelDescriptor::scripted("b", 1, vec![])
            .with_prices(Price::per_million(10.into()), Price::per_million(30.into()));
        assert!(CascadeConfig::new(vec![cheap.clone(), dear.clone()]).validate().is_ok());
        assert!(matches!(
            CascadeConfig::new(vec![dear.clone(), cheap.clone()]).validate(),
            Err(CascadeConfigError::TiersNotAscending { index: 1, .. })
        ));
        assert_eq!(CascadeConfig::new(vec![]).validate(), Err(CascadeConfigError::NoTiers));
        let mut c = CascadeConfig::new(vec![cheap.clone(), dear]);
        c.repeat_threshold = 1;
        assert_eq!(c.validate(), Err(CascadeConfigError::RepeatThreshold(1)));
        let mut c = CascadeConfig::new(vec![cheap]);
        c.expert_enabled = true;
        assert_eq!(c.validate(), Err(CascadeConfigError::ExpertNeedsTwoTiers));
    }

    #[test]
    fn scripted_backend_is_reused_across_steps() {
        let replies = vec![list("."), list("a"), list("b")];
        let mut rig = Rig::new(vec![("cheap", 3, replies), ("gpt4", 1, vec![])]);
        for step in 0..3 {
            let plan = rig.plan(step).unwrap();
            rig.state.record_action(plan.response.action_key());
        }
        let backend: std::sync::Arc<ScriptedBackend> = rig.gateway.scripted("cheap").unwrap();
        assert_eq!(backend.remaining(), 0);
        assert_eq!(rig.ledger.events().iter().map(|e| e.step_index).collect::<Vec<_>>(), vec![0, 1, 2]);
    }
}
