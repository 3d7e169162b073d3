use std::fmt;
use std::process::ExitCode;

/// A command failure with its exit-code class.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Input(anyhow::Error),
    Compute(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            Failure::Usage(_) => 1,
            Failure::Input(_) => 2,
            Failure::Compute(_) => 3,
        })
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::Usage(anyhow::anyhow!("{msg}"))
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        Failure::Input(anyhow::anyhow!("{msg}"))
    }

    pub fn compute(msg: impl fmt::Display) -> Self {
        Failure::Compute(anyhow::anyhow!("{msg}"))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (kind, e) = match self {
            Failure::Usage(e) => ("usage", e),
            Failure::Input(e) => ("input", e),
            Failure::Compute(e) => ("computation", e),
        };
        write!(f, "{kind} error: {e:#}")
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

/// Tags an error with its exit-code class and a context line.
pub trait Classify<T> {
    fn usage_err(self, ctx: impl fmt::Display) -> CmdResult<T>;
    fn input_err(self, ctx: impl fmt::Display) -> CmdResult<T>;
    fn compute_err(self, ctx: impl fmt::Display) -> CmdResult<T>;
}

impl<T, E> Classify<T> for Result<T, E>
where
    E: Into<anyhow::Error>,
{
    fn usage_err(self, ctx: impl fmt::Display) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into().context(ctx.to_string())))
    }

    fn input_err(self, ctx: impl fmt::Display) -> CmdResult<T> {
        self.map_err(|e| Failure::Input(e.into().context(ctx.to_string())))
    }

    fn compute_err(self, ctx: impl fmt::Display) -> CmdResult<T> {
        self.map_err(|e| Failure::Compute(e.into().context(ctx.to_string())))
    }
}
