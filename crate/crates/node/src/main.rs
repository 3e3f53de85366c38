use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use cogplant_core::json::{self, Json};
use cogplant_core::pipeline::fit_linear;
use cogplant_core::sim::{Domain, ScenarioConfig};
use cogplant_core::sync::{plan_placement, problem_from_json};
use cogplant_core::time::Timestamp;

use cogplant::client;
use cogplant::config::{NodeConfig, NodeRole};
use cogplant::scenario::{run, Mode, ScenarioOptions};

const USAGE: &str = "\
cogplant - desk-scale cognitive plant stack

USAGE:
  cogplant node --role <edge|cloud> --config <file.json>
  cogplant scenario <asphalt|steel|pharma> [--seed N] [--duration N]
           [--tick-ms N] [--anomaly-at N] [--anomaly-sigma F] [--inproc]
           [--partition FROM:TO] [--telemetry-out PATH] [--buffer-capacity N]
  cogplant query --node <url> [--type T] [--id-pattern P]
           [--client-id ID] [--secret S]
  cogplant fit --node <url> --entity <id> --target <attr> --inputs a,b,c
           --from <ts> --to <ts> [--client-id ID] [--secret S]
  cogplant placement plan --problem <file.json>

Scenario exit code is 0 iff the edge/cloud reconcile is all-equal and, when
an anomaly is configured, the expected alert fired.
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

struct Flags {
    values: BTreeMap<String, String>,
    switches: Vec<String>,
}

fn parse_flags(args: &[String]) -> Result<Flags, String> {
    let mut values = BTreeMap::new();
    let mut switches = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        if let Some(name) = arg.strip_prefix("--") {
            // switches take no value
            if matches!(name, "inproc" | "http" | "help") {
                switches.push(name.to_string());
                i += 1;
                continue;
            }
            let value = args
                .get(i + 1)
                .ok_or_else(|| format!("--{name} needs a value"))?;
            values.insert(name.to_string(), value.clone());
            i += 2;
        } else {
            return Err(format!("unexpected argument {arg}"));
        }
    }
    Ok(Flags { values, switches })
}

fn dispatch(args: &[String]) -> Result<ExitCode, String> {
    match args.first().map(String::as_str) {
        Some("node") => cmd_node(&args[1..]),
        Some("scenario") => cmd_scenario(&args[1..]),
        Some("query") => cmd_query(&args[1..]),
        Some("fit") => cmd_fit(&args[1..]),
        Some("placement") => cmd_placement(&args[1..]),
        Some("help") | None => {
            print!("{USAGE}");
            Ok(ExitCode::SUCCESS)
        }
        Some(other) => Err(format!("unknown command {other}\n\n{USAGE}")),
    }
}

fn cmd_node(args: &[String]) -> Result<ExitCode, String> {
    let flags = parse_flags(args)?;
    let config_path = flags
        .values
        .get("config")
        .ok_or("--config is required")?;
    let cfg = NodeConfig::from_file(std::path::Path::new(config_path)).map_err(|e| e.to_string())?;
    if let Some(role) = flags.values.get("role") {
        let requested = NodeRole::parse(role).ok_or("role must be edge or cloud")?;
        if requested != cfg.role {
            return Err(format!(
                "--role {role} does not match config role {}",
                cfg.role.as_str()
            ));
        }
    }
    let role = cfg.role;
    let handle = cogplant::node::start(cfg).map_err(|e| e.to_string())?;
    eprintln!("{} node listening on {}", role.as_str(), handle.base_url());
    loop {
        std::thread::sleep(Duration::from_secs(3600));
    }
}

fn cmd_scenario(args: &[String]) -> Result<ExitCode, String> {
    let domain = args
        .first()
        .and_then(|d| Domain::parse(d))
        .ok_or("scenario needs a domain: asphalt, steel or pharma")?;
    let flags = parse_flags(&args[1..])?;
    let get_u64 = |key: &str, default: u64| -> Result<u64, String> {
        match flags.values.get(key) {
            Some(v) => v.parse().map_err(|_| format!("--{key} must be an integer")),
            None => Ok(default),
        }
    };
    let mut cfg = ScenarioConfig::new(domain, get_u64("seed", 42)?, get_u64("duration", 600)?);
    cfg.tick_millis = get_u64("tick-ms", 0)?;
    if flags.values.contains_key("anomaly-at") {
        cfg.anomaly_at = Some(get_u64("anomaly-at", 0)?);
    }
    if let Some(sigma) = flags.values.get("anomaly-sigma") {
        cfg.anomaly_magnitude_sigma = sigma
            .parse()
            .map_err(|_| "--anomaly-sigma must be a number")?;
    }
    let mode = if flags.switches.iter().any(|s| s == "inproc") {
        Mode::InProc
    } else {
        Mode::Http
    };
    let mut options = ScenarioOptions::new(cfg, mode);
    if let Some(p) = flags.values.get("partition") {
        let (from, to) = p
            .split_once(':')
            .ok_or("--partition must be FROM:TO in ticks")?;
        options.partition = Some((
            from.parse().map_err(|_| "bad partition start")?,
            to.parse().map_err(|_| "bad partition end")?,
        ));
    }
    if let Some(path) = flags.values.get("telemetry-out") {
        options.telemetry_path = PathBuf::from(path);
    }
    options.buffer_capacity = get_u64("buffer-capacity", 1_000_000)? as usize;

    let report = run(&options).map_err(|e| e.to_string())?;
    println!(
        "{}",
        report
            .to_json()
            .to_canonical()
            .map_err(|e| e.to_string())?
    );
    Ok(if report.exit_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn obtain_token(base: &str, flags: &Flags) -> Result<String, String> {
    let client_id = flags
        .values
        .get("client-id")
        .map(String::as_str)
        .unwrap_or(cogplant::scenario::SCENARIO_CLIENT_ID);
    let secret = flags
        .values
        .get("secret")
        .map(String::as_str)
        .unwrap_or(cogplant::scenario::SCENARIO_CLIENT_SECRET);
    let body = Json::Obj(vec![
        ("clientId".to_string(), Json::str(client_id)),
        ("secret".to_string(), Json::str(secret)),
        ("ttl".to_string(), Json::Num(3600.0)),
    ])
    .to_canonical()
    .map_err(|e| e.to_string())?;
    let response = client::post_json(
        &format!("{base}/token"),
        None,
        body.as_bytes(),
        Duration::from_secs(10),
    )
    .map_err(|e| e.to_string())?;
    if !response.is_success() {
        return Err(format!("token request failed with status {}", response.status));
    }
    let v = json::parse(&response.body).map_err(|e| e.to_string())?;
    v.get("token")
        .and_then(Json::as_str)
        .map(String::from)
        .ok_or_else(|| "no token in response".to_string())
}

fn cmd_query(args: &[String]) -> Result<ExitCode, String> {
    let flags = parse_flags(args)?;
    let node = flags.values.get("node").ok_or("--node is required")?;
    let token = obtain_token(node, &flags)?;
    let mut query = Vec::new();
    if let Some(t) = flags.values.get("type") {
        query.push(format!("type={t}"));
    }
    if let Some(p) = flags.values.get("id-pattern") {
        query.push(format!("idPattern={p}"));
    }
    if query.is_empty() {
        return Err("--type or --id-pattern is required".into());
    }
    let url = format!("{node}/entities?{}", query.join("&"));
    let response = client::get(&url, Some(&token), Duration::from_secs(10)).map_err(|e| e.to_string())?;
    if !response.is_success() {
        return Err(format!("query failed with status {}", response.status));
    }
    println!("{}", String::from_utf8_lossy(&response.body));
    Ok(ExitCode::SUCCESS)
}

fn fetch_series(
    node: &str,
    token: &str,
    entity: &str,
    attr: &str,
    from: &str,
    to: &str,
) -> Result<Vec<(Timestamp, f64)>, String> {
    let url = format!("{node}/temporal/{entity}/{attr}?from={from}&to={to}&agg=raw");
    let response = client::get(&url, Some(token), Duration::from_secs(10)).map_err(|e| e.to_string())?;
    if !response.is_success() {
        return Err(format!("temporal query for {attr} failed: {}", response.status));
    }
    let v = json::parse(&response.body).map_err(|e| e.to_string())?;
    Ok(v.as_arr()
        .unwrap_or(&[])
        .iter()
        .filter_map(|p| {
            let at = Timestamp::parse(p.get("observedAt")?.as_str()?).ok()?;
            Some((at, p.get("value")?.as_f64()?))
        })
        .collect())
}

fn cmd_fit(args: &[String]) -> Result<ExitCode, String> {
    let flags = parse_flags(args)?;
    let node = flags.values.get("node").ok_or("--node is required")?;
    let entity = flags.values.get("entity").ok_or("--entity is required")?;
    let target = flags.values.get("target").ok_or("--target is required")?;
    let inputs: Vec<String> = flags
        .values
        .get("inputs")
        .ok_or("--inputs is required")?
        .split(',')
        .map(str::to_string)
        .collect();
    let from = flags.values.get("from").ok_or("--from is required")?;
    let to = flags.values.get("to").ok_or("--to is required")?;
    let token = obtain_token(node, &flags)?;

    let target_series = fetch_series(node, &token, entity, target, from, to)?;
    let mut input_series = Vec::new();
    for input in &inputs {
        let series: BTreeMap<Timestamp, f64> =
            fetch_series(node, &token, entity, input, from, to)?
                .into_iter()
                .collect();
        input_series.push(series);
    }

    // join rows on exact observation time across target and all inputs
    let mut rows = Vec::new();
    for (at, y) in &target_series {
        let mut xs = Vec::with_capacity(inputs.len());
        let mut complete = true;
        for series in &input_series {
            match series.get(at) {
                Some(x) => xs.push(*x),
                None => {
                    complete = false;
                    break;
                }
            }
        }
        if complete {
            rows.push((xs, *y));
        }
    }
    let model = fit_linear(&rows, &inputs, target, cogplant::node::now_ts())
        .map_err(|e| format!("fit failed: {e} ({} joined rows)", rows.len()))?;
    println!(
        "{}",
        model.to_json().to_canonical().map_err(|e| e.to_string())?
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_placement(args: &[String]) -> Result<ExitCode, String> {
    if args.first().map(String::as_str) != Some("plan") {
        return Err("usage: cogplant placement plan --problem <file.json>".into());
    }
    let flags = parse_flags(&args[1..])?;
    let path = flags.values.get("problem").ok_or("--problem is required")?;
    let bytes = std::fs::read(path).map_err(|e| format!("{path}: {e}"))?;
    let v = json::parse(&bytes).map_err(|e| format!("{path}: {e}"))?;
    let problem = problem_from_json(&v)?;
    let plan = plan_placement(&problem).map_err(|e| e.to_string())?;
    println!("{}", plan.to_json().to_canonical().map_err(|e| e.to_string())?);
    Ok(ExitCode::SUCCESS)
}
