//! Policy engine for sandboxing browser-using agents at the HTTP layer.

pub mod body;
pub mod compiler;
pub mod condlang;
pub mod context;
pub mod enforce;
pub mod pattern;
pub mod policy;
pub mod request;
pub mod sitemap;
pub mod value;

pub use compiler::{compile, AuthTable, BoundCondition, Decision, DenyCause, Route};
pub use condlang::{parse_condition, ConditionProgram, Verdict};
pub use context::{ArgCatalog, Clock, ContextCache, LockoutConfig, ManualClock, SystemClock};
pub use enforce::{decide, Enforcement, RouteKind};
pub use pattern::{pattern_matches, ParsedUrl, UrlPattern};
pub use policy::{
    assemble_composite, parse_composite, parse_policy_set, validate_partial_order, CompositePolicy, Effect, Policy,
    PolicyError, PolicySet, Selection,
};
pub use request::RequestView;
pub use sitemap::{parse_sitemap, Method, Sitemap, SitemapEntry, SitemapError};
pub use value::{Amount, Value, ValueMap, ValueType};
