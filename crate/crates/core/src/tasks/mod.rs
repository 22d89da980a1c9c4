//! Synthetic proxy tasks, the symbolic vocabulary and the tool-call grammar.

mod generate;
pub mod io;
mod toolcall;
mod vocab;

pub use generate::{
    generate_dataset, make_probe_input, mix_datasets, probe_cut, recall_leaks, recall_table, tool_example,
    SyntheticExample, TaskKind, ARITH_MAX, RECALL_KEYS,
};
pub use toolcall::{
    parse_call_prefix, parse_tool_call, ApiSpec, ParseFailure, ToolCall, ToolCatalog, ValueAlphabet,
};
pub use vocab::{Vocabulary, BOS, CALL, EOS, PAD, SEP};
