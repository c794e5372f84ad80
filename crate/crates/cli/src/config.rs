//! Kernel flags shared by the subcommands.

use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use sandboxd_core::guest::MODE_ENV;
use sandboxd_core::kernel::{KernelConfig, KernelHandle};
use sandboxd_core::vfs::{provider_from_spec, FsInitError, ProviderError};
use thiserror::Error;

pub const GUEST_PATH: &str = "/usr/bin:/bin";
pub const GUEST_HOME: &str = "/home";

/// Syscall convention for guest programs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Mode {
    #[default]
    Async,
    Sync,
}

/// `HOSTDIR:/GUESTPATH`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mount {
    pub host: PathBuf,
    pub guest: String,
}

pub fn parse_mount(s: &str) -> Result<Mount, String> {
    match s.rsplit_once(':') {
        Some((host, guest)) if !host.is_empty() && guest.starts_with('/') => {
            Ok(Mount { host: PathBuf::from(host), guest: guest.to_owned() })
        }
        _ => Err(format!("expected HOSTDIR:/GUESTPATH, got {s:?}")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct KernelArgs {
    /// Copy a host directory into the guest tree at boot.
    #[arg(long = "mount", value_name = "HOSTDIR:/GUESTPATH", value_parser = parse_mount)]
    pub mounts: Vec<Mount>,

    /// Read-only lower layer fetched lazily: `dir:PATH` or an http(s) base URL.
    #[arg(long, value_name = "dir:PATH|URL")]
    pub underlay: Option<String>,

    /// Syscall convention for guest programs.
    #[arg(long, value_enum, default_value_t = Mode::Async)]
    pub mode: Mode,

    /// Pipe buffer capacity in bytes.
    #[arg(long, env = "SANDBOXD_PIPE_CAP", value_name = "BYTES", value_parser = clap::value_parser!(u64).range(1..))]
    pub pipe_cap: Option<u64>,
}

#[derive(Debug, Error)]
pub enum BootError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Fs(#[from] FsInitError),
}

impl KernelArgs {
    pub fn config(&self) -> Result<KernelConfig, BootError> {
        let mut cfg = KernelConfig::new(sandboxd_userland::registry());
        if let Some(spec) = &self.underlay {
            cfg = cfg.with_underlay(provider_from_spec(spec)?);
        }
        for m in &self.mounts {
            cfg = cfg.with_mount(&m.host, &m.guest);
        }
        if let Some(cap) = self.pipe_cap {
            cfg = cfg.with_pipe_cap(usize::try_from(cap).unwrap_or(usize::MAX));
        }
        Ok(cfg)
    }

    pub fn boot(&self) -> Result<KernelHandle, BootError> {
        Ok(KernelHandle::boot_blocking(self.config()?)?)
    }

    /// Environment for processes started from the host.
    pub fn guest_env(&self) -> BTreeMap<String, String> {
        let mut env = BTreeMap::from([
            ("PATH".to_owned(), GUEST_PATH.to_owned()),
            ("HOME".to_owned(), GUEST_HOME.to_owned()),
            ("PWD".to_owned(), "/".to_owned()),
        ]);
        if self.mode == Mode::Sync {
            env.insert(MODE_ENV.to_owned(), "sync".to_owned());
        }
        env
    }
}
