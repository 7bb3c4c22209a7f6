//! `tether`: the entity-linking pipeline driver.
//!
//! Commands run one pipeline stage each and talk to each other only through
//! the workdir. Configuration comes from a JSON file and/or flags (flags
//! win). On failure the last stderr line is a single machine-parseable JSON
//! object carrying the exit code.

mod commands;
mod config;
mod error;
mod workspace;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Overrides;
use error::{CResult, CliError};
use workspace::{Split, Workspace};

#[derive(Parser)]
#[command(
    name = "tether",
    version,
    about = "Alias-table-free entity linking: dense retrieval plus cross-attention reranking",
    propagate_version = true,
    args_override_self = true
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitChoice {
    Train,
    Dev,
    Test,
}

impl From<SplitChoice> for Split {
    fn from(s: SplitChoice) -> Split {
        match s {
            SplitChoice::Train => Split::Train,
            SplitChoice::Dev => Split::Dev,
            SplitChoice::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitScope {
    Train,
    Dev,
    Test,
    All,
}

impl SplitScope {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitScope::Train => vec![Split::Train],
            SplitScope::Dev => vec![Split::Dev],
            SplitScope::Test => vec![Split::Test],
            SplitScope::All => vec![Split::Train, Split::Dev, Split::Test],
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Number of entities in the synthetic KB
    #[arg(long, value_name = "N")]
    entities: Option<usize>,
    /// Confusable same-name entity pairs among them
    #[arg(long, value_name = "N")]
    confusable_pairs: Option<usize>,
    /// Filler-vocabulary size
    #[arg(long, value_name = "N")]
    vocab_size: Option<usize>,
    /// Documents generated per entity
    #[arg(long, value_name = "N")]
    mentions_per_entity: Option<usize>,
    /// Chance a pair mention's local sentence leaks the keyword
    #[arg(long, value_name = "X")]
    hint_rate: Option<f64>,
    /// Chance a singleton mention uses its group alias as the span
    #[arg(long, value_name = "X")]
    alias_rate: Option<f64>,
    /// Singletons per alias group
    #[arg(long, value_name = "N")]
    alias_group: Option<usize>,
    /// Add one extra singleton mention per document
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true", value_name = "BOOL")]
    secondary_mentions: Option<bool>,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Which mention split(s) to retrieve candidates for
    #[arg(long, value_enum, default_value = "all")]
    split: SplitScope,
}

#[derive(Args)]
struct TrainRerankerArgs {
    /// Write every training input as one space-joined token line
    #[arg(long, value_name = "PATH")]
    dump_inputs: Option<PathBuf>,
}

#[derive(Args)]
struct SplitArgs {
    /// Which mention split to run on
    #[arg(long, value_enum, default_value = "test")]
    split: SplitChoice,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Which mention split to score
    #[arg(long, value_enum, default_value = "test")]
    split: SplitChoice,
    /// Score the raw candidate lists without a reranker
    #[arg(long)]
    retrieval_only: bool,
    /// Also write one JSONL record per mislinked mention
    #[arg(long, value_name = "PATH")]
    dump_errors: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus at the configured KB/mention paths
    Synth(SynthArgs),
    /// Parse the corpus and build the vocabulary and embedding table
    Ingest,
    /// Train the dual-encoder retriever on the train split
    TrainRetriever,
    /// Encode every KB entity into the exact-search index
    Index,
    /// Write top-k candidate lists for mention splits
    Retrieve(RetrieveArgs),
    /// Train the cross-attention reranker on retrieved candidates
    TrainReranker(TrainRerankerArgs),
    /// Predict one entity per mention and write the links
    Link(SplitArgs),
    /// Score a split and write the metrics report
    Evaluate(EvaluateArgs),
    /// Train and score one reranker per feature-ablation row
    Ablate(SplitArgs),
}

fn dispatch(cli: &Cli) -> CResult<()> {
    let cfg = cli.overrides.resolve()?;
    if let Some(n) = cfg.effective_threads() {
        // Ignore the error: the pool can only be set once per process, and a
        // second initialization means it is already the size we asked for.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ws = Workspace::open(&cfg)?;
    match &cli.cmd {
        Cmd::Synth(a) => {
            let params = commands::SynthParams {
                entities: a.entities,
                confusable_pairs: a.confusable_pairs,
                vocab_size: a.vocab_size,
                mentions_per_entity: a.mentions_per_entity,
                hint_rate: a.hint_rate,
                alias_rate: a.alias_rate,
                alias_group: a.alias_group,
                secondary_mentions: a.secondary_mentions,
            };
            commands::cmd_synth(&cfg, &params)
        }
        Cmd::Ingest => commands::cmd_ingest(&cfg, &ws),
        Cmd::TrainRetriever => commands::cmd_train_retriever(&cfg, &ws),
        Cmd::Index => commands::cmd_index(&cfg, &ws),
        Cmd::Retrieve(a) => commands::cmd_retrieve(&cfg, &ws, &a.split.splits()),
        Cmd::TrainReranker(a) => commands::cmd_train_reranker(&cfg, &ws, a.dump_inputs.as_deref()),
        Cmd::Link(a) => commands::cmd_link(&cfg, &ws, a.split.into()),
        Cmd::Evaluate(a) => {
            commands::cmd_evaluate(&cfg, &ws, a.split.into(), a.retrieval_only, a.dump_errors.as_deref())
        }
        Cmd::Ablate(a) => commands::cmd_ablate(&cfg, &ws, a.split.into()),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            // Bad usage is a config problem: report it as such after the
            // human-readable message.
            let _ = e.print();
            let line = CliError::Core(tether_core::Error::Config(
                e.to_string().lines().next().unwrap_or("invalid arguments").to_string(),
            ))
            .machine_line();
            eprintln!("{line}");
            std::process::exit(3);
        }
        Err(e) => {
            // --help and --version land here.
            let _ = e.print();
            std::process::exit(0);
        }
    };

    match dispatch(&cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("{}", e.machine_line());
            std::process::exit(e.exit_code());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    /// Walks the whole flag registry: every flag on every command must carry
    /// help text and must show up in that command's rendered --help.
    #[test]
    fn help_enumerates_every_flag() {
        let mut root = Cli::command();
        root.build();

        let mut checked = 0usize;
        let mut stack = vec![root];
        while let Some(mut cmd) = stack.pop() {
            let help = cmd.render_long_help().to_string();
            for arg in cmd.get_arguments() {
                if arg.get_id() == "help" || arg.get_id() == "version" {
                    continue;
                }
                let long = arg
                    .get_long()
                    .unwrap_or_else(|| panic!("flag {} on `{}` has no --long form", arg.get_id(), cmd.get_name()));
                assert!(
                    arg.get_help().is_some(),
                    "--{long} on `{}` is undocumented",
                    cmd.get_name()
                );
                assert!(
                    help.contains(&format!("--{long}")),
                    "--{long} missing from `{}` help output",
                    cmd.get_name()
                );
                checked += 1;
            }
            for sub in cmd.get_subcommands() {
                stack.push(sub.clone());
            }
        }
        assert!(checked > 50, "expected a substantial flag registry, found {checked}");
    }

    #[test]
    fn the_nine_commands_are_registered() {
        let root = Cli::command();
        let names: Vec<&str> = root.get_subcommands().map(|c| c.get_name()).collect();
        assert_eq!(
            names,
            [
                "synth",
                "ingest",
                "train-retriever",
                "index",
                "retrieve",
                "train-reranker",
                "link",
                "evaluate",
                "ablate",
            ]
        );
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
