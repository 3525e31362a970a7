//! Token-level cost accounting.
//!
//! The cost of a call is `price_in * tokens_in + price_out * tokens_out`,
//! evaluated exactly and rounded once to six fractional digits. Report
//! totals are sums of those per-event amounts, so they reconcile to the
//! micro-dollar.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::ModelDescriptor;
use crate::money::{Money, Price};

pub type EventId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UsagePurpose {
    Planning,
    WorkerAction,
    Retrieval,
    Expert,
}

impl fmt::Display for UsagePurpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UsagePurpose::Planning => "planning",
            UsagePurpose::WorkerAction => "worker_action",
            UsagePurpose::Retrieval => "retrieval",
            UsagePurpose::Expert => "expert",
        })
    }
}

/// One billed model call. `temperature` and `profile` are the request
/// parameters the call was made with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageEvent {
    pub id: EventId,
    pub run_id: String,
    pub step_index: usize,
    pub model_id: String,
    pub purpose: UsagePurpose,
    pub tokens_in: u64,
    pub tokens_out: u64,
    pub temperature: f64,
    pub profile: String,
}

/// Per-token prices for one model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelPricing {
    pub price_per_input_token: Price,
    pub price_per_output_token: Price,
}

impl From<&ModelDescriptor> for ModelPricing {
    fn from(m: &ModelDescriptor) -> Self {
        ModelPricing {
            price_per_input_token: m.price_per_input_token,
            price_per_output_token: m.price_per_output_token,
        }
    }
}

pub type PricingTable = BTreeMap<String, ModelPricing>;

pub fn pricing_table<'a>(models: impl IntoIterator<Item = &'a ModelDescriptor>) -> PricingTable {
    models.into_iter().map(|m| (m.id.clone(), ModelPricing::from(m))).collect()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LedgerError {
    #[error("usage event is for model {event} but pricing is for {pricing}")]
    ModelMismatch { event: String, pricing: String },
    #[error("no pricing for model {0}")]
    UnknownModel(String),
}

fn event_cost(event: &UsageEvent, pricing: &ModelPricing) -> Money {
    Money::from_decimal(
        pricing.price_per_input_token.times(event.tokens_in) + pricing.price_per_output_token.times(event.tokens_out),
    )
}

/// Cost of a single event under `model`'s prices.
pub fn cost_of(event: &UsageEvent, model: &ModelDescriptor) -> Result<Money, LedgerError> {
    if event.model_id != model.id {
        return Err(LedgerError::ModelMismatch { event: event.model_id.clone(), pricing: model.id.clone() });
    }
    Ok(event_cost(event, &ModelPricing::from(model)))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CostReport {
    pub per_event_costs: Vec<Money>,
    pub total: Money,
    pub breakdown_by_model: BTreeMap<String, Money>,
    pub breakdown_by_purpose: BTreeMap<UsagePurpose, Money>,
    /// Present when the report spans several runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub average_per_run: Option<Money>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runs: Option<usize>,
}

/// Prices every event and sums. Zero-price models still show up in the
/// breakdowns with `$0`.
pub fn aggregate(events: &[UsageEvent], pricing: &PricingTable) -> Result<CostReport, LedgerError> {
    let mut report = CostReport::default();
    for event in events {
        let price = pricing.get(&event.model_id).ok_or_else(|| LedgerError::UnknownModel(event.model_id.clone()))?;
        let cost = event_cost(event, price);
        report.per_event_costs.push(cost);
        report.total += cost;
        *report.breakdown_by_model.entry(event.model_id.clone()).or_default() += cost;
        *report.breakdown_by_purpose.entry(event.purpose).or_default() += cost;
    }
    Ok(report)
}

/// Merges per-run reports and fills in the average cost per run.
pub fn combine_runs(reports: &[CostReport]) -> CostReport {
    let mut out = CostReport::default();
    for r in reports {
        out.per_event_costs.extend_from_slice(&r.per_event_costs);
        out.total += r.total;
        for (k, v) in &r.breakdown_by_model {
            *out.breakdown_by_model.entry(k.clone()).or_default() += *v;
        }
        for (k, v) in &r.breakdown_by_purpose {
            *out.breakdown_by_purpose.entry(*k).or_default() += *v;
        }
    }
    out.runs = Some(reports.len());
    out.average_per_run = Some(out.total.div_count(reports.len()));
    out
}

/// Append-only event store for one run.
#[derive(Debug, Clone, Default)]
pub struct CostLedger {
    events: Vec<UsageEvent>,
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores the event, assigning the next id.
    pub fn record(&mut self, mut event: UsageEvent) -> EventId {
        let id = self.events.len();
        event.id = id;
        self.events.push(event);
        id
    }

    pub fn events(&self) -> &[UsageEvent] {
        &self.events
    }

    pub fn events_since(&self, id: EventId) -> &[UsageEvent] {
        &self.events[id.min(self.events.len())..]
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rust_decimal::Decimal;
    use std::str::FromStr;

    fn per_million(s: &str) -> Price {
        Price::per_million(Decimal::from_str(s).unwrap())
    }

    fn event(model: &str, purpose: UsagePurpose, tin: u64, tout: u64) -> UsageEvent {
        UsageEvent {
            id: 0,
            run_id: "run".into(),
            step_index: 0,
            model_id: model.into(),
            purpose,
            tokens_in: tin,
            tokens_out: tout,
            temperature: 0.2,
            profile: String::new(),
        }
    }

    fn paid(id: &str, pin: &str, pout: &str) -> ModelDescriptor {
        ModelDescriptor::scripted(id, 1, vec![]).with_prices(per_million(pin), per_million(pout))
    }

    #[test]
    fn zero_tokens_cost_nothing() {
        let m = paid("m", "10", "30");
        assert_eq!(cost_of(&event("m", UsagePurpose::Planning, 0, 0), &m).unwrap(), Money::ZERO);
    }

    #[test]
    fn half_dollar_per_million_input() {
        let m = paid("m", "0.50", "1.50");
        let cost = cost_of(&event("m", UsagePurpose::Planning, 1_000_000, 0), &m).unwrap();
        assert_eq!(cost, Money::from_str("0.50").unwrap());
    }

    #[test]
    fn ten_thousand_in_one_thousand_out() {
        // 10,000 * $10/M + 1,000 * $30/M = 0.10 + 0.03
        let m = paid("m", "10", "30");
        let cost = cost_of(&event("m", UsagePurpose::Planning, 10_000, 1_000), &m).unwrap();
        assert_eq!(cost.to_string(), "$0.130000");
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let m = paid("m", "10", "30");
        assert!(matches!(
            cost_of(&event("other", UsagePurpose::Planning, 1, 1), &m),
            Err(LedgerError::ModelMismatch { .. })
        ));
    }

    #[test]
    fn empty_aggregate() {
        let report = aggregate(&[], &PricingTable::new()).unwrap();
        assert_eq!(report.total, Money::ZERO);
        assert!(report.breakdown_by_model.is_empty());
        assert!(report.breakdown_by_purpose.is_empty());
    }

    #[test]
    fn zero_price_events_still_listed() {
        let free = ModelDescriptor::scripted("free", 3, vec![]);
        let gpt = paid("gpt", "10", "30");
        let table = pricing_table([&free, &gpt]);
        let events = vec![
            event("free", UsagePurpose::Planning, 500, 500),
            event("free", UsagePurpose::WorkerAction, 900, 100),
            event("gpt", UsagePurpose::Expert, 10_000, 1_000),
        ];
        let report = aggregate(&events, &table).unwrap();
        assert_eq!(report.total, cost_of(&events[2], &gpt).unwrap());
        assert_eq!(report.breakdown_by_model["free"], Money::ZERO);
        assert_eq!(report.breakdown_by_purpose[&UsagePurpose::WorkerAction], Money::ZERO);
    }

    #[test]
    fn unknown_model() {
        let err = aggregate(&[event("x", UsagePurpose::Planning, 1, 1)], &PricingTable::new()).unwrap_err();
        assert_eq!(err, LedgerError::UnknownModel("x".into()));
    }

    #[test]
    fn average_over_eight_runs() {
        let gpt = paid("gpt", "10", "30");
        let table = pricing_table([&gpt]);
        let per_run: Vec<CostReport> = (1..=8u64)
            .map(|i| aggregate(&[event("gpt", UsagePurpose::Planning, i * 1000, i * 100)], &table).unwrap())
            .collect();
        // Oracle: sum of 0.01*i + 0.003*i over i=1..8 = 0.013 * 36 = 0.468, / 8 = 0.0585
        let combined = combine_runs(&per_run);
        assert_eq!(combined.total, Money::from_str("0.468").unwrap());
        assert_eq!(combined.average_per_run, Some(Money::from_str("0.0585").unwrap()));
        assert_eq!(combined.runs, Some(8));
    }

    #[test]
    fn ledger_assigns_sequential_ids() {
        let mut ledger = CostLedger::new();
        assert_eq!(ledger.record(event("m", UsagePurpose::Planning, 1, 1)), 0);
        assert_eq!(ledger.record(event("m", UsagePurpose::Planning, 1, 1)), 1);
        assert_eq!(ledger.events_since(1).len(), 1);
        assert_eq!(ledger.events()[1].id, 1);
    }

    fn arb_event() -> impl Strategy<Value = UsageEvent> {
        (0usize..3, 0usize..4, 0u64..2_000_000, 0u64..200_000).prop_map(|(m, p, tin, tout)| {
            let purpose =
                [UsagePurpose::Planning, UsagePurpose::WorkerAction, UsagePurpose::Retrieval, UsagePurpose::Expert][p];
            event(["free", "cheap", "gpt"][m], purpose, tin, tout)
        })
    }

    fn table() -> PricingTable {
        pricing_table(&[
            ModelDescriptor::scripted("free", 1, vec![]),
            paid("cheap", "0.5", "1.5"),
            paid("gpt", "10", "30"),
        ])
    }

    proptest! {
        #[test]
        fn additivity(a in prop::collection::vec(arb_event(), 0..40), b in prop::collection::vec(arb_event(), 0..40)) {
            let t = table();
            let mut both = a.clone();
            both.extend(b.iter().cloned());
            let lhs = aggregate(&both, &t).unwrap().total;
            let rhs = aggregate(&a, &t).unwrap().total + aggregate(&b, &t).unwrap().total;
            prop_assert_eq!(lhs, rhs);
        }

        #[test]
        fn breakdowns_sum_to_total(events in prop::collection::vec(arb_event(), 0..60)) {
            let r = aggregate(&events, &table()).unwrap();
            let by_model: Money = r.breakdown_by_model.values().sum();
            let by_purpose: Money = r.breakdown_by_purpose.values().sum();
            let per_event: Money = r.per_event_costs.iter().sum();
            prop_assert_eq!(by_model, r.total);
            prop_assert_eq!(by_purpose, r.total);
            prop_assert_eq!(per_event, r.total);
        }

        #[test]
        fn adding_an_event_never_decreases_total(events in prop::collection::vec(arb_event(), 0..30), extra in arb_event()) {
            let t = table();
            let before = aggregate(&events, &t).unwrap().total;
            let mut more = events.clone();
            more.push(extra);
            prop_assert!(aggregate(&more, &t).unwrap().total >= before);
        }
    }
}
