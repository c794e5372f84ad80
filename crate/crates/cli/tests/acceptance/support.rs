use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::bounded;
use sandboxd_core::kernel::{HostSpawn, KernelConfig, KernelHandle, Stdin};
use sandboxd_core::worker::Registry;

pub const WAIT: Duration = Duration::from_secs(60);

pub struct Captured {
    pub status: i32,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl Captured {
    pub fn out(&self) -> String {
        String::from_utf8_lossy(&self.stdout).into_owned()
    }

    pub fn err(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

pub fn boot(config: KernelConfig) -> Result<KernelHandle, String> {
    KernelHandle::boot_blocking(config).map_err(|e| format!("boot: {e}"))
}

/// The standard userland plus whatever `extra` registers.
pub fn registry(extra: impl FnOnce(&mut Registry)) -> Registry {
    let mut reg = sandboxd_userland::registry();
    extra(&mut reg);
    reg
}

/// Runs `path` as a host root process and collects its output.
pub fn exec(h: &KernelHandle, path: &str, argv: &[&str], env: &[(&str, &str)], stdin: Stdin) -> Result<Captured, String> {
    let (tx, rx) = bounded(1);
    let out = Arc::new(Mutex::new(Vec::new()));
    let err = Arc::new(Mutex::new(Vec::new()));
    let mut spec = HostSpawn::new(path, argv);
    spec.env = env.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
    spec.env.entry("PATH".into()).or_insert_with(|| "/usr/bin:/bin".into());
    spec.stdin = stdin;
    let (o, e) = (out.clone(), err.clone());
    spec.stdout = Some(Box::new(move |b: &[u8]| o.lock().unwrap().extend_from_slice(b)));
    spec.stderr = Some(Box::new(move |b: &[u8]| e.lock().unwrap().extend_from_slice(b)));
    spec.on_exit = Box::new(move |_, code| {
        let _ = tx.send(code);
    });
    h.spawn(spec).map_err(|e| format!("spawn {path}: {}", e.message()))?;
    let status = rx.recv_timeout(WAIT).map_err(|_| format!("{path} did not exit within {WAIT:?}"))?;
    let stdout = std::mem::take(&mut *out.lock().unwrap());
    let stderr = std::mem::take(&mut *err.lock().unwrap());
    Ok(Captured { status, stdout, stderr })
}

/// Runs a shell command line in the guest.
pub fn sh(h: &KernelHandle, cmd: &str) -> Result<Captured, String> {
    exec(h, "/bin/sh", &["sh", "-c", cmd], &[], Stdin::Null)
}

/// Waits for every task to exit, then checks the kernel's bookkeeping.
pub fn quiesce(h: &KernelHandle) -> Result<(), String> {
    let deadline = Instant::now() + WAIT;
    while h.exec(|k| k.live_tasks()) > 0 {
        if Instant::now() > deadline {
            return Err(format!("tasks still live: {:?}", h.pids()));
        }
        thread::sleep(Duration::from_millis(5));
    }
    h.audit()
}

/// Runs `cmd` with the host's POSIX shell in `dir` under the C locale.
pub fn host_sh(dir: &Path, cmd: &str) -> Result<Captured, String> {
    let o = Command::new("/bin/sh")
        .arg("-c")
        .arg(cmd)
        .current_dir(dir)
        .env("LC_ALL", "C")
        .output()
        .map_err(|e| format!("host sh: {e}"))?;
    Ok(Captured { status: o.status.code().unwrap_or(-1), stdout: o.stdout, stderr: o.stderr })
}

/// A host tool, if installed.
pub fn host_tool(name: &str) -> Option<String> {
    std::env::var_os("PATH")?
        .to_str()?
        .split(':')
        .map(|d| format!("{d}/{name}"))
        .find(|p| Path::new(p).is_file())
}
