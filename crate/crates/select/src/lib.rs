//! Picks the least-privileged policies for a task from a domain's predefined
//! policy set, with a model doing the picking and a person confirming it.

pub mod bench;
pub mod bundle;
pub mod confirm;
pub mod prompts;
pub mod provider;
pub mod selector;

pub use bench::{classify_failures, parse_dataset, run_bench, BenchOptions, BenchReport, BenchTask, Category};
pub use bundle::{fetch_bundle, load_dir, Bundle, BundleSource, FetchError};
pub use confirm::{confirm, ConfirmError};
pub use prompts::{PolicyCard, PROMPT_VERSION};
pub use provider::{ChatMessage, Provider, ProviderError, RemoteChat, StubAnswer, StubProvider};
pub use selector::{select, DomainSelection, SelectOptions, SelectionError, SelectionResult, TaskSpec};
