//! Command-line surface of the reconstruction pipeline.

pub mod commands;
pub mod config;
pub mod pipeline;

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    use ptyff::Error as E;
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io { .. } | E::Format { .. } | E::Json(_) => 3,
                E::Diverged { .. } | E::NonFinite { .. } => 4,
                _ => 2,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}
