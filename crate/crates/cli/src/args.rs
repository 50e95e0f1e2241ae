use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "trialign",
    version,
    about = "Align point-cloud encoders with frozen text/image embeddings"
)]
pub struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// Embedding cache; replaces the one named in the manifest.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic labeled train/test pair with its caches.
    Synth,
    /// Validate a manifest and its cache, sample referenced meshes, write a normalized manifest.
    Prepare {
        #[arg(long)]
        sidecar_dir: Option<PathBuf>,
        #[arg(long)]
        num_points: Option<usize>,
    },
    /// Train and write checkpoint, report and per-epoch metrics.
    Train,
    /// Zero-shot classification report on a labeled manifest.
    Eval {
        /// Prompt templates, one per line, `{}` marking the label.
        #[arg(long)]
        templates: Option<PathBuf>,
        /// JSON object of label -> vector in the aligned space, instead of prompts.
        #[arg(long)]
        class_vectors: Option<PathBuf>,
    },
    /// Few-shot linear probe on frozen shape embeddings.
    Probe {
        #[arg(long)]
        test_manifest: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        shots: Vec<usize>,
    },
    /// Build a retrieval index from a manifest and checkpoint, or from raw vectors.
    Index {
        /// JSON object of id -> vector.
        #[arg(long)]
        vectors: Option<PathBuf>,
    },
    /// Run one query, or a joint query over two targets.
    Retrieve {
        #[arg(short = 'k', default_value_t = 10)]
        k: usize,
        #[arg(long)]
        joint: bool,
        /// Query targets: JSON files or inline JSON (a vector or a target object).
        #[arg(required = true)]
        targets: Vec<String>,
    },
    /// Serve the retrieval index over HTTP.
    Serve {
        #[arg(long)]
        addr: Option<String>,
    },
}
