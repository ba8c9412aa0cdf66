use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use svp_core::env::EnvSpec;
use svp_core::service::{router, AppState};
use svp_core::solve::{value_iteration, DEFAULT_TOLERANCE};
use svp_core::svp::{near_greedy_construct_dag, solve_policy, Algorithm};

fn app() -> Router {
    router(AppState::new(), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn chain_body(zeta: f64) -> Value {
    json!({ "env": { "kind": "chain", "k": 5, "seed": 0, "gamma": 0.9 }, "zeta": zeta })
}

fn offered(obs: &Value) -> Vec<usize> {
    obs["offered"].as_array().unwrap().iter().map(|o| o["action"].as_u64().unwrap() as usize).collect()
}

#[tokio::test]
async fn lists_environments_and_algorithms() {
    let (status, body) = call(&app(), "GET", "/envs", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(body["envs"].as_array().unwrap().len() >= 4);
    assert!(body["algorithms"].as_array().unwrap().iter().any(|a| a == "near-greedy-vi"));
}

#[tokio::test]
async fn offered_sets_follow_the_construction() {
    let app = app();
    let (status, snap) = call(&app, "POST", "/sessions", Some(chain_body(0.05))).await;
    assert_eq!(status, StatusCode::CREATED);
    let mdp = EnvSpec::chain(5, 0, 0.9).build().unwrap();
    let (_, v) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
    let built = near_greedy_construct_dag(&mdp, &v.0, 0.05).unwrap();
    let id = snap["session_id"].as_str().unwrap().to_string();
    let mut obs = snap["observation"].clone();
    assert_eq!(obs["state"], 0);
    while !obs["done"].as_bool().unwrap() {
        let s = obs["state"].as_u64().unwrap() as usize;
        let menu = offered(&obs);
        assert_eq!(menu, built.set(s).to_vec(), "state {s}");
        let (status, next) =
            call(&app, "POST", &format!("/sessions/{id}/act"), Some(json!({ "action": menu[0] }))).await;
        assert_eq!(status, StatusCode::OK);
        obs = next;
    }
}

#[tokio::test]
async fn zero_zeta_offers_only_optimal_actions() {
    let app = app();
    let (_, snap) = call(&app, "POST", "/sessions", Some(chain_body(0.0))).await;
    let mdp = EnvSpec::chain(5, 0, 0.9).build().unwrap();
    let (q, _) = value_iteration(&mdp, DEFAULT_TOLERANCE).unwrap();
    let obs = &snap["observation"];
    for a in offered(obs) {
        assert!((q.get(0, a) - q.max(0)).abs() < 1e-9);
    }
}

#[tokio::test]
async fn missing_fixed_point_is_unprocessable() {
    let body = json!({ "env": { "kind": "appendix_c" }, "zeta": 0.2, "algo": "near-greedy-vi" });
    let (status, err) = call(&app(), "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(err["status"], 422);
    assert!(err["error"].as_str().unwrap().contains("near-greedy"));
}

#[tokio::test]
async fn bad_requests_and_unknown_sessions() {
    let app = app();
    let (status, _) = call(&app, "GET", "/sessions/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/sessions/nope/act", Some(json!({ "action": 0 }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "zeta": 0.1 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/sessions", Some(json!({ "env": { "kind": "chain", "k": 5 } }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let body = json!({ "env": { "kind": "chain", "k": 5, "seed": 0 }, "algo": "nonsense" });
    let (status, _) = call(&app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let (_, snap) = call(&app, "POST", "/sessions", Some(chain_body(0.05))).await;
    let id = snap["session_id"].as_str().unwrap();
    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/act"), Some(json!({ "action": 9 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn off_menu_actions_need_the_flag() {
    let app = app();
    let (_, snap) = call(&app, "POST", "/sessions", Some(chain_body(0.0))).await;
    let id = snap["session_id"].as_str().unwrap();
    let menu = offered(&snap["observation"]);
    let outside = (0..4).find(|a| !menu.contains(a)).expect("an action outside the menu");
    let uri = format!("/sessions/{id}/act");
    let (status, _) = call(&app, "POST", &uri, Some(json!({ "action": outside }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let (status, _) = call(&app, "POST", &uri, Some(json!({ "action": outside, "allow_off_menu": true }))).await;
    assert_eq!(status, StatusCode::OK);
    let (_, snap) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(snap["history"][0]["off_menu"], true);
}

#[tokio::test]
async fn adversarial_client_keeps_the_guarantee() {
    let app = app();
    let zeta = 0.05;
    let (_, snap) = call(&app, "POST", "/sessions", Some(chain_body(zeta))).await;
    let id = snap["session_id"].as_str().unwrap().to_string();
    let mut obs = snap["observation"].clone();
    let guarantee = obs["guarantee"].as_f64().unwrap();
    while !obs["done"].as_bool().unwrap() {
        let worst = obs["offered"]
            .as_array()
            .unwrap()
            .iter()
            .min_by(|a, b| a["q_star"].as_f64().unwrap().total_cmp(&b["q_star"].as_f64().unwrap()))
            .unwrap()["action"]
            .clone();
        let (status, next) = call(&app, "POST", &format!("/sessions/{id}/act"), Some(json!({ "action": worst }))).await;
        assert_eq!(status, StatusCode::OK);
        obs = next;
    }
    let ret = obs["discounted_return"].as_f64().unwrap();
    let mdp = EnvSpec::chain(5, 0, 0.9).build().unwrap();
    let solved = solve_policy(&mdp, Algorithm::NearGreedyVi, zeta).unwrap();
    assert!((guarantee - (1.0 - zeta) * solved.v_star[0]).abs() < 1e-12);
    assert!(ret >= guarantee - 1e-9, "return {ret} below {guarantee}");

    let (status, _) = call(&app, "POST", &format!("/sessions/{id}/act"), Some(json!({ "action": 0 }))).await;
    assert_eq!(status, StatusCode::GONE);
}

#[tokio::test]
async fn history_replays_the_return_and_reset_is_deterministic() {
    let app = app();
    let body = json!({ "env": { "kind": "frozen_lake", "map": "4x4", "gamma": 0.9 }, "zeta": 0.1, "algo": "conservative", "seed": 3 });
    let (_, snap) = call(&app, "POST", "/sessions", Some(body)).await;
    let id = snap["session_id"].as_str().unwrap().to_string();
    let gamma = snap["gamma"].as_f64().unwrap();
    let start = snap["start_state"].clone();

    let mut obs = snap["observation"].clone();
    for _ in 0..6 {
        if obs["done"].as_bool().unwrap() {
            break;
        }
        let a = offered(&obs)[0];
        obs = call(&app, "POST", &format!("/sessions/{id}/act"), Some(json!({ "action": a }))).await.1;
    }
    let (_, snap) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let history = snap["history"].as_array().unwrap();
    let replay: f64 =
        history.iter().enumerate().map(|(t, h)| gamma.powi(t as i32) * h["reward"].as_f64().unwrap()).sum();
    assert!((replay - snap["observation"]["discounted_return"].as_f64().unwrap()).abs() < 1e-12);
    for pair in history.windows(2) {
        assert_eq!(pair[0]["next_state"], pair[1]["state"]);
    }

    let (status, first) = call(&app, "POST", &format!("/sessions/{id}/reset"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["resets"], 1);
    assert_eq!(first["history"].as_array().unwrap().len(), 0);
    assert_eq!(first["start_state"], start);
    assert_eq!(first["observation"]["discounted_return"], 0.0);
}

#[tokio::test]
async fn session_ids_are_distinct() {
    let app = app();
    let (_, a) = call(&app, "POST", "/sessions", Some(chain_body(0.05))).await;
    let (_, b) = call(&app, "POST", "/sessions", Some(chain_body(0.05))).await;
    assert_ne!(a["session_id"], b["session_id"]);
}
