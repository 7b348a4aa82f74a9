#include <doctest.h>

#include <chrono>
#include <thread>

#include "fixtures.hpp"
#include "geodiff/error.hpp"
#include "geodiff/io.hpp"
#include "geodiff/service.hpp"

// After Eigen: <resolv.h> defines _res.
#include <httplib.h>

using namespace geodiff;
using namespace geodiff::service;
using nlohmann::json;

namespace {

json session_body(int steps) {
  Raster img(8, 8, 3, 0.1f);
  Raster mask(8, 8, 1);
  for (int y = 2; y < 4; ++y)
    for (int x = 2; x < 4; ++x) {
      mask.at(y, x) = 1.0f;
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = 0.9f;
    }
  return {{"image", io::base64_encode(io::encode_png(img))},
          {"mask", io::base64_encode(io::encode_png(mask))},
          {"steps", steps}};
}

json edit_body(int steps, double dx = 2) {
  return {{"transform", {{"kind", "translate2d"}, {"params", {{"offset", {dx, 0.0}}}}}},
          {"steps", steps},
          {"diagnostics", true}};
}

json wait_done(Service& svc, const std::string& job) {
  for (int i = 0; i < 2000; ++i) {
    const json s = svc.job_status(job);
    if (s["state"] == "done" || s["state"] == "failed") return s;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  return svc.job_status(job);
}

std::shared_ptr<const diffnet::Denoiser> tiny() {
  return std::make_shared<const diffnet::Denoiser>(fixture::tiny_model());
}

}  // namespace

TEST_CASE("sessions invert once and serve repeated edits") {
  Service svc(tiny(), {.workers = 2, .default_steps = 8});
  const std::string sid = svc.create_session(session_body(8))["session_id"];
  svc.wait_idle();
  CHECK(svc.session_status(sid)["state"] == "ready");
  CHECK(svc.inversion_count() == 1);

  const std::string j1 = svc.submit_edit(sid, edit_body(8))["job_id"];
  const std::string j2 = svc.submit_edit(sid, edit_body(8, 3))["job_id"];
  const json s1 = wait_done(svc, j1);
  const json s2 = wait_done(svc, j2);
  CHECK(s1["state"] == "done");
  CHECK(s2["state"] == "done");
  CHECK(svc.inversion_count() == 1);
  CHECK(s1["progress"]["step"] == 8);
  CHECK(s1["progress"]["fraction"] == 1.0);
  CHECK(!s1["loss_curves"].empty());

  const json r = svc.job_result(j1);
  REQUIRE(r["warp_error"].is_number());
  CHECK(std::isfinite(r["warp_error"].get<double>()));
  CHECK(io::decode_png(io::base64_decode(r["edited"].get<std::string>())).height() == 8);
  CHECK(r["diagnostics"]["attention"].size() == 8u * 8u);
  const auto png = svc.attention_png(j1, 1, 0);
  CHECK(io::decode_png(png).height() == 16);
  CHECK_THROWS_AS(svc.attention_png(j1, 99, 0), NotFound);

  // A different step budget needs its own inversion.
  const std::string j3 = svc.submit_edit(sid, edit_body(4))["job_id"];
  wait_done(svc, j3);
  CHECK(svc.inversion_count() == 2);
}

TEST_CASE("service error mapping") {
  Service svc(tiny(), {.workers = 1, .default_steps = 4});
  CHECK_THROWS_AS(svc.session_status("nope"), NotFound);
  CHECK_THROWS_AS(svc.job_status("nope"), NotFound);
  CHECK_THROWS_AS(svc.create_session({{"image", "AAAA"}}), ValidationError);

  const std::string a = svc.create_session(session_body(4))["session_id"];
  svc.wait_idle();
  CHECK_THROWS_AS(svc.submit_edit(a, {{"bogus", 1}}), ValidationError);
  CHECK_THROWS_AS(svc.submit_edit(a, {{"transform", {{"kind", "scale2d"}, {"params", {{"scale", {-1.0, 1.0}}}}}}}), ValidationError);

  // Keep the only worker busy so the next session is still inverting.
  const std::string busy = svc.submit_edit(a, edit_body(300))["job_id"];
  const std::string b = svc.create_session(session_body(4))["session_id"];
  CHECK(svc.session_status(b)["state"] == "inverting");
  CHECK_THROWS_AS(svc.submit_edit(b, edit_body(4)), Conflict);
  CHECK_THROWS_AS(svc.job_result(busy), Conflict);
  svc.wait_idle();
  CHECK(svc.job_status(busy)["state"] == "done");
}

TEST_CASE("HTTP routes") {
  Service svc(tiny(), {.workers = 2, .default_steps = 6});
  httplib::Server server;
  register_routes(server, svc);
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread th([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);

  auto post = [&](const std::string& path, const json& body) { return cli.Post(path, body.dump(), "application/json"); };

  auto created = post("/sessions", session_body(6));
  REQUIRE(created);
  CHECK(created->status == 200);
  CHECK(created->get_header_value("Access-Control-Allow-Origin") == "*");
  const std::string sid = json::parse(created->body)["session_id"];

  CHECK(cli.Get("/sessions/unknown")->status == 404);
  CHECK(cli.Get("/jobs/unknown")->status == 404);
  CHECK(post("/sessions", json{{"mask", "x"}})->status == 422);
  CHECK(cli.Post("/sessions", "{not json", "application/json")->status == 422);
  CHECK(cli.Options("/sessions")->status == 204);

  svc.wait_idle();
  auto prev = post("/sessions/" + sid + "/preview", json{{"transform", {{"kind", "identity"}}}});
  REQUIRE(prev->status == 200);
  const json pv = json::parse(prev->body);
  const Raster overlay = io::decode_png(io::base64_decode(pv["warp_overlay"].get<std::string>()));
  CHECK(overlay.height() == 8);
  CHECK(!mask::any(io::decode_mask_png(io::base64_decode(pv["m_disocc"].get<std::string>()))));

  CHECK(post("/sessions/" + sid + "/edits", json{{"steps", "many"}})->status == 422);
  auto edit = post("/sessions/" + sid + "/edits", edit_body(6));
  REQUIRE(edit->status == 200);
  const std::string jid = json::parse(edit->body)["job_id"];
  json st;
  for (int i = 0; i < 2000; ++i) {
    st = json::parse(cli.Get("/jobs/" + jid)->body);
    if (st["state"] == "done" || st["state"] == "failed") break;
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
  }
  CHECK(st["state"] == "done");
  auto res = cli.Get("/jobs/" + jid + "/result");
  REQUIRE(res->status == 200);
  const json body = json::parse(res->body);
  CHECK(body["warp_error"].is_number());
  const std::string url = body["diagnostics"]["attention"][0]["url"];
  auto heat = cli.Get(url);
  REQUIRE(heat->status == 200);
  CHECK(heat->get_header_value("Content-Type") == "image/png");
  CHECK(cli.Get("/jobs/" + jid + "/attention/999/0")->status == 404);

  server.stop();
  th.join();
}
