use std::path::PathBuf;
use std::process::Command;

/// Examples are built by `cargo test` into target/<profile>/examples.
fn example(name: &str) -> PathBuf {
    let deps = std::env::current_exe().unwrap().parent().unwrap().to_path_buf();
    deps.parent().unwrap().join("examples").join(name)
}

fn run(name: &str, args: &[&str]) -> String {
    let exe = example(name);
    let out = Command::new(&exe).args(args).output().unwrap_or_else(|e| panic!("{}: {e}", exe.display()));
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "{name}: {:?}\n{text}{}", out.status, String::from_utf8_lossy(&out.stderr));
    text
}

#[test]
fn examples_run() {
    assert!(run("basic_domain", &[]).contains("sum after rewind = 30"));
    assert_eq!(run("nested_domains", &[]).matches("plugin failed").count(), 2);
    let guarded = run("guarded_functions", &[]);
    assert!(guarded.contains("\"<unprintable>\"") && guarded.contains("Ok(42) after 3 attempts"), "{guarded}");
    assert!(run("kv_server", &[]).contains("STAT rewinds 1"));
    assert!(run("availability", &[]).contains("90102857"));
    assert!(run("backend_probe", &[]).contains("portable"));
    assert!(run("manual_rewind", &[]).contains("reason: 6"));
    assert!(run("rewind_latency", &["200"]).contains("over 200 cycles"));
    let injected = run("fault_injection", &["200"]);
    assert!(!injected.contains("NOT CONTAINED") && injected.contains("intact: true"), "{injected}");
}
