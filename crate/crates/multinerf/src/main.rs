use clap::{Parser, Subcommand, ValueEnum};
use multinerf::cli::{cmd_ablate, cmd_build, cmd_render, AblateArgs, BuildArgs, RenderArgs};
use multinerf::scheduler::RenderPath;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "multinerf", about = "Adaptive multi-NeRF builder and renderer")]
struct Cli {
    /// Worker threads (default: machine parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Override the scene file's seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a tree from a scene and write it to a file.
    Build {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Build the regular-grid baseline at this resolution (power of two).
        #[arg(long)]
        grid: Option<u32>,
    },
    /// Render a built tree to a PPM image.
    Render {
        #[arg(long)]
        tree: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scheduling path; both produce identical images.
        #[arg(long, value_enum, default_value_t = PathArg::Batched)]
        path: PathArg,
        /// Traverse to leaves only, disabling the hierarchical cutoff.
        #[arg(long)]
        no_hcheck: bool,
        /// Also print PSNR against the analytic reference render.
        #[arg(long)]
        psnr_ref: bool,
    },
    /// Compare {adaptive, regular} x {hcheck, leaf-only} on one scene.
    Ablate {
        #[arg(long)]
        scene: PathBuf,
        /// Resolution of the regular-grid baseline (power of two).
        #[arg(long)]
        grid: u32,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    Batched,
    Naive,
}

impl From<PathArg> for RenderPath {
    fn from(p: PathArg) -> RenderPath {
        match p {
            PathArg::Batched => RenderPath::Batched,
            PathArg::Naive => RenderPath::Naive,
        }
    }
}

fn run(cli: Cli) -> multinerf::Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Build { scene, out, grid } => {
            cmd_build(&BuildArgs { scene, out, grid, seed: cli.seed }, &mut stdout)
        }
        Command::Render { tree, scene, out, path, no_hcheck, psnr_ref } => cmd_render(
            &RenderArgs {
                tree,
                scene,
                out,
                path: path.into(),
                no_hcheck,
                psnr_ref,
                seed: cli.seed,
            },
            &mut stdout,
        ),
        Command::Ablate { scene, grid } => {
            cmd_ablate(&AblateArgs { scene, grid, seed: cli.seed }, &mut stdout)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(workers) = cli.workers {
        pool = pool.num_threads(workers);
    }
    let pool = match pool.build() {
        Ok(pool) => pool,
        Err(e) => {
            eprintln!("error: failed to build thread pool: {e}");
            return ExitCode::from(3);
        }
    };

    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
