//! Guest programs for sandboxd.
//!
//! [`registry`] installs every program under `/usr/bin`, plus `/bin/sh`.

pub mod forktest;
pub mod httpd;
pub mod rt;
pub mod shell;
pub mod utils;

use sandboxd_core::worker::Registry;

use utils::{files, grep, listing, procs, sort, text};

/// Every userland program, ready to boot a kernel with.
pub fn registry() -> Registry {
    let mut r = Registry::new();
    r.register("cat", files::cat)
        .register("cp", files::cp)
        .register("mkdir", files::mkdir)
        .register("rm", files::rm)
        .register("rmdir", files::rmdir)
        .register("touch", files::touch)
        .register("tee", files::tee)
        .register("echo", text::echo)
        .register("head", text::head)
        .register("tail", text::tail)
        .register("sha1sum", text::sha1sum)
        .register("wc", text::wc)
        .register("grep", grep::grep)
        .register("sort", sort::sort)
        .register("ls", listing::ls)
        .register("stat", listing::stat)
        .register("true", procs::true_)
        .register("false", procs::false_)
        .register("env", procs::env)
        .register("printenv", procs::printenv)
        .register("sleep", procs::sleep)
        .register("xargs", procs::xargs)
        .register("sh", shell::main)
        .register("httpd", httpd::main)
        .register_forkable("forktest", forktest::main)
        .install_at("/bin/sh", "sh")
        .install_at("/usr/bin/env-echo", "printenv");
    r
}
