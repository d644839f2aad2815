//! Command-line surface. Each subcommand maps its typed flags onto config
//! keys; flags are applied last, so they win over `--config` and `--set`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use crate::config::Experiment;

#[derive(Debug, Parser)]
#[command(name = "nhl", version, about = "Mean-field network experiments with reproducible CSV output")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config layered over the subcommand's preset.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; every component seed is derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Any config key, e.g. `--set flow.dt=0.01`; repeatable.
    #[arg(long = "set", value_name = "KEY=JSON")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct NetArgs {
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FlowArgs {
    #[arg(long)]
    pub dt: Option<f64>,
    /// Final flow time.
    #[arg(long)]
    pub horizon: Option<f64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network by gradient flow and record its risk.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        weight_decay: Option<f64>,
    },
    /// Integrate the deep-linear mean-field system.
    LinearMf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        input_dim: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        /// Fine steps per memory node.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Layer and tangent kernel Grams before and after training.
    Kernels {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Error of random narrow compressions of a wide teacher.
    Compress {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        teacher_width: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        eval_n: Option<usize>,
    },
    /// Rademacher complexity estimates against the norm-based bound.
    Rademacher {
        #[command(flatten)]
        common: Common,
        /// Ladder complexity budget.
        #[arg(long)]
        norm: Option<f64>,
        #[arg(long)]
        num_tau: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
        #[arg(long)]
        ascent_steps: Option<usize>,
    },
    /// Penalised training of shallow and deeper nets on a depth-separation target.
    DepthSep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
    },
    /// Linear mean-field trajectory against finite-width particle runs.
    Fig2 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long)]
        input_dim: Option<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Kernel alignment and feature movement while fitting sin(2x).
    Fig3 {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        net: NetArgs,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Deviation of finite-width trajectories from a wide reference run.
    Lln {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long)]
        depth: Option<usize>,
        #[arg(long)]
        reference_width: Option<usize>,
        #[arg(long)]
        replicates: Option<usize>,
    },
    /// Across-neuron spread of second-layer pre-activations at two widths.
    Degeneracy {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flow: FlowArgs,
        #[arg(long)]
        depth: Option<usize>,
    },
}

#[derive(Default)]
struct Flags(Vec<(String, Value)>);

impl Flags {
    fn put<T: Serialize>(&mut self, key: &str, value: Option<T>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), serde_json::to_value(v).expect("flag values serialize")));
        }
    }

    fn common(&mut self, c: &Common) {
        self.put("seed", c.seed);
        self.put("out", c.out.as_ref());
    }

    fn net(&mut self, n: &NetArgs) {
        self.put("net.depth", n.depth);
        self.put("net.width", n.width);
    }

    fn flow(&mut self, f: &FlowArgs) {
        self.put("flow.dt", f.dt);
        self.put("flow.horizon", f.horizon);
    }
}

impl Command {
    /// The experiment, its shared options, and the typed flags as config keys.
    pub fn request(&self) -> (Experiment, &Common, Vec<(String, Value)>) {
        let mut f = Flags::default();
        let (exp, common) = match self {
            Command::Train { common, net, flow, n, beta, weight_decay } => {
                f.net(net);
                f.flow(flow);
                f.put("data.n", *n);
                f.put("flow.beta", *beta);
                f.put("flow.weight_decay", *weight_decay);
                (Experiment::Train, common)
            }
            Command::LinearMf { common, flow, depth, input_dim, n, stride } => {
                f.flow(flow);
                f.put("net.depth", *depth);
                f.put("data.input_dim", *input_dim);
                f.put("data.n", *n);
                f.put("linear_mf.mem_stride", *stride);
                (Experiment::LinearMf, common)
            }
            Command::Kernels { common, net, flow, n } => {
                f.net(net);
                f.flow(flow);
                f.put("data.n", *n);
                (Experiment::Kernels, common)
            }
            Command::Compress { common, depth, teacher_width, trials, eval_n } => {
                f.put("net.depth", *depth);
                f.put("compress.teacher_width", *teacher_width);
                f.put("compress.trials", *trials);
                f.put("compress.eval_n", *eval_n);
                (Experiment::Compress, common)
            }
            Command::Rademacher { common, norm, num_tau, restarts, ascent_steps } => {
                f.put("rademacher.norm", *norm);
                f.put("rademacher.num_tau", *num_tau);
                f.put("rademacher.ascent.restarts", *restarts);
                f.put("rademacher.ascent.steps", *ascent_steps);
                (Experiment::Rademacher, common)
            }
            Command::DepthSep { common, flow, width, n } => {
                f.flow(flow);
                f.put("net.width", *width);
                f.put("data.n", *n);
                (Experiment::DepthSep, common)
            }
            Command::Fig2 { common, flow, input_dim, n, stride } => {
                f.flow(flow);
                f.put("data.input_dim", *input_dim);
                f.put("data.n", *n);
                f.put("linear_mf.mem_stride", *stride);
                (Experiment::Fig2, common)
            }
            Command::Fig3 { common, net, flow, replicates } => {
                f.net(net);
                f.flow(flow);
                f.put("sweep.replicates", *replicates);
                (Experiment::Fig3, common)
            }
            Command::Lln { common, flow, depth, reference_width, replicates } => {
                f.flow(flow);
                f.put("net.depth", *depth);
                f.put("sweep.reference_width", *reference_width);
                f.put("sweep.replicates", *replicates);
                (Experiment::Lln, common)
            }
            Command::Degeneracy { common, flow, depth } => {
                f.flow(flow);
                f.put("net.depth", *depth);
                (Experiment::Degeneracy, common)
            }
        };
        f.common(common);
        (exp, common, f.0)
    }
}
