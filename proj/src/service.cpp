#include "cvil/service.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <httplib.h>

#include "cvil/error.hpp"

namespace cvil {

using nlohmann::json;

namespace {

json envelope_ok(json data, std::uint64_t sequence) {
  return json{{"ok", true}, {"data", std::move(data)}, {"session_sequence", sequence}};
}

json envelope_error(const std::string& code, const std::string& message,
                    std::uint64_t sequence) {
  return json{{"ok", false},
              {"error", {{"code", code}, {"message", message}}},
              {"session_sequence", sequence}};
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  try {
    json j = json::parse(req.body);
    if (!j.is_object()) throw Error(errc::kParse, "request body must be a JSON object");
    return j;
  } catch (const json::exception& e) {
    throw Error(errc::kParse, std::string("request body is not valid JSON: ") + e.what());
  }
}

template <typename T>
T require_field(const json& body, const char* name) {
  if (!body.contains(name))
    throw Error(errc::kInvalidArgument, std::string("missing field '") + name + "'");
  try {
    return body.at(name).get<T>();
  } catch (const json::exception&) {
    throw Error(errc::kInvalidArgument, std::string("field '") + name + "' has the wrong type");
  }
}

template <typename T>
T optional_field(const json& body, const char* name, T fallback) {
  if (!body.contains(name) || body.at(name).is_null()) return fallback;
  return require_field<T>(body, name);
}

std::optional<std::uint64_t> expected_sequence(const json& body) {
  if (!body.contains("expected_sequence") || body.at("expected_sequence").is_null())
    return std::nullopt;
  return require_field<std::uint64_t>(body, "expected_sequence");
}

double parse_double(const std::string& text, const char* name) {
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size() || !std::isfinite(v)) throw std::invalid_argument(name);
    return v;
  } catch (const std::exception&) {
    throw Error(errc::kInvalidArgument, std::string("query parameter '") + name +
                                            "' is not a finite number");
  }
}

std::size_t parse_size(const std::string& text, const char* name) {
  std::size_t v = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || ptr != text.data() + text.size())
    throw Error(errc::kInvalidArgument,
                std::string("query parameter '") + name + "' is not a non-negative integer");
  return v;
}

double required_query_double(const httplib::Request& req, const char* name) {
  if (!req.has_param(name))
    throw Error(errc::kInvalidArgument, std::string("missing query parameter '") + name + "'");
  return parse_double(req.get_param_value(name), name);
}

ClassId parse_class_path(const httplib::Request& req, const EmbeddingDataset& ds) {
  const std::string text = req.matches[1];
  ClassId c = kNoClass;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), c);
  if (ec != std::errc() || ptr != text.data() + text.size() || !ds.schema().contains(c))
    throw Error(errc::kUnknownClass, "unknown class '" + text + "'");
  return c;
}

std::string content_type_for(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& ch : ext) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  if (ext == ".jpg" || ext == ".jpeg") return "image/jpeg";
  if (ext == ".png") return "image/png";
  if (ext == ".gif") return "image/gif";
  if (ext == ".webp") return "image/webp";
  if (ext == ".bmp") return "image/bmp";
  return "application/octet-stream";
}

json class_list(const EmbeddingDataset& ds) {
  json out = json::array();
  for (std::size_t c = 0; c < ds.num_classes(); ++c)
    out.push_back({{"id", c}, {"name", ds.schema().name(static_cast<ClassId>(c))}});
  return out;
}

}  // namespace

int http_status_for(const std::string& code) {
  if (code == errc::kInvalidArgument || code == errc::kParse || code == errc::kNonFinite)
    return 400;
  if (code == errc::kUnknownId || code == errc::kUnknownClass || code == errc::kNotFound)
    return 404;
  if (code == errc::kBusy || code == errc::kStaleSequence || code == errc::kClassMismatch ||
      code == errc::kForbiddenTransition || code == errc::kUntrained ||
      code == errc::kMissingPredictions || code == errc::kDuplicateId ||
      code == errc::kCancelled)
    return 409;
  return 500;
}

json to_json(const DensityCurve& curve) {
  return json{{"class_id", curve.class_id},
              {"empty", curve.empty()},
              {"count", curve.count},
              {"bandwidth", curve.bandwidth},
              {"value_min", curve.value_min},
              {"value_max", curve.value_max},
              {"x", curve.x},
              {"y", curve.y}};
}

ApiServer::ApiServer(std::shared_ptr<Session> session, ServiceOptions options)
    : session_(std::move(session)),
      options_(std::move(options)),
      server_(std::make_unique<httplib::Server>()) {
  if (!session_) throw Error(errc::kInvalidArgument, "server needs a session");
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  });
  install_routes();
}

ApiServer::~ApiServer() { stop(); }

int ApiServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = server_->bind_to_any_port(host);
    if (bound < 0) throw Error(errc::kIo, "cannot bind " + host);
    return bound;
  }
  if (!server_->bind_to_port(host, port))
    throw Error(errc::kIo, "cannot bind " + host + ":" + std::to_string(port) +
                               " (address in use?)");
  return port;
}

void ApiServer::listen() { server_->listen_after_bind(); }

void ApiServer::stop() {
  if (server_) server_->stop();
}

bool ApiServer::running() const { return server_->is_running(); }

DensityCurve ApiServer::density_for(ClassId c, const SessionSnapshot& snap) {
  {
    std::lock_guard lock(cache_mutex_);
    if (cache_sequence_ == snap.sequence) {
      const auto it = density_cache_.find(c);
      if (it != density_cache_.end()) return it->second;
    }
  }
  const auto part = unlabeled_partition(c, *snap.scores, *snap.ledger);
  std::vector<double> values;
  values.reserve(part.size());
  for (const auto& s : part) values.push_back(s.value);
  DensityCurve curve = kde_curve(values, c);
  std::lock_guard lock(cache_mutex_);
  if (cache_sequence_ != snap.sequence) {
    if (snap.sequence < cache_sequence_ && cache_sequence_ != ~std::uint64_t{0}) return curve;
    density_cache_.clear();
    cache_sequence_ = snap.sequence;
  }
  density_cache_[c] = curve;
  return curve;
}

void ApiServer::install_routes() {
  auto& srv = *server_;
  Session* const sp = session_.get();

  // Wraps a handler producing JSON data; errors become the error envelope.
  using JsonHandler = std::function<json(const httplib::Request&, std::uint64_t&)>;
  auto wrap = [sp](JsonHandler fn, int ok_status = 200) {
    return [sp, fn = std::move(fn), ok_status](const httplib::Request& req,
                                                     httplib::Response& res) {
      std::uint64_t seq = sp->snapshot().sequence;
      try {
        json data = fn(req, seq);
        send_json(res, ok_status, envelope_ok(std::move(data), seq));
      } catch (const Error& e) {
        send_json(res, http_status_for(e.code()),
                  envelope_error(e.code(), e.what(), sp->snapshot().sequence));
      } catch (const std::exception& e) {
        send_json(res, 500, envelope_error("internal", e.what(), sp->snapshot().sequence));
      }
    };
  };

  auto items_json = [sp](const SelectionResult& r) {
    const auto& ds = sp->dataset();
    json items = json::array();
    for (const auto& s : r.items) {
      json item{{"id", ds.id(s.index)}, {"value", s.value}};
      item["image_url"] = ds.image_ref(s.index).empty() ? json(nullptr)
                                                        : json("/images/" + ds.id(s.index));
      items.push_back(std::move(item));
    }
    return json{{"items", std::move(items)}, {"total", r.total}, {"shown", r.items.size()}};
  };

  auto preview_limit = [this](const httplib::Request& req) {
    std::size_t limit = options_.default_preview_limit;
    if (req.has_param("limit")) limit = parse_size(req.get_param_value("limit"), "limit");
    return std::min(limit, options_.max_preview_limit);
  };

  auto require_scores = [](const SessionSnapshot& snap) {
    if (!snap.scores) throw Error(errc::kUntrained, "no trained model yet; retrain first");
  };

  srv.Get("/api/summary", wrap([sp](const httplib::Request&, std::uint64_t& seq) {
            const auto snap = sp->snapshot();
            seq = snap.sequence;
            const auto& ds = sp->dataset();
            return json{{"n", ds.size()},
                        {"d", ds.dim()},
                        {"classes", class_list(ds)},
                        {"measure", std::string(to_string(snap.measure))},
                        {"trained", snap.trained()},
                        {"has_images", ds.has_images()}};
          }));

  srv.Get(R"(/api/classes/([^/]+)/density)",
          wrap([this, sp, require_scores](const httplib::Request& req, std::uint64_t& seq) {
            const auto snap = sp->snapshot();
            seq = snap.sequence;
            const ClassId c = parse_class_path(req, sp->dataset());
            require_scores(snap);
            json out = to_json(density_for(c, snap));
            out["measure"] = std::string(to_string(snap.measure));
            return out;
          }));

  srv.Get(R"(/api/classes/([^/]+)/preview)",
          wrap([sp, items_json, preview_limit, require_scores](const httplib::Request& req,
                                                                     std::uint64_t& seq) {
            const auto snap = sp->snapshot();
            seq = snap.sequence;
            const ClassId c = parse_class_path(req, sp->dataset());
            const double lo = required_query_double(req, "lo");
            const double hi = required_query_double(req, "hi");
            const std::size_t limit = preview_limit(req);
            require_scores(snap);
            json out = items_json(resolve_selection({c, lo, hi}, *snap.scores, *snap.ledger, limit));
            out["class_id"] = c;
            out["lo"] = lo;
            out["hi"] = hi;
            return out;
          }));

  srv.Get(R"(/api/classes/([^/]+)/hover)",
          wrap([sp, items_json, preview_limit, require_scores](const httplib::Request& req,
                                                                     std::uint64_t& seq) {
            const auto snap = sp->snapshot();
            seq = snap.sequence;
            const ClassId c = parse_class_path(req, sp->dataset());
            const double value = required_query_double(req, "value");
            const std::size_t limit = preview_limit(req);
            require_scores(snap);
            json out = items_json(hover_preview(c, value, *snap.scores, *snap.ledger, limit));
            out["class_id"] = c;
            out["value"] = value;
            return out;
          }));

  srv.Post("/api/labels/instance",
           wrap([sp](const httplib::Request& req, std::uint64_t& seq) {
             const json body = parse_body(req);
             const auto id = require_field<std::string>(body, "id");
             const auto c = require_field<ClassId>(body, "class");
             seq = sp->label_instance(id, c, expected_sequence(body));
             return json{{"id", id}, {"class", c}};
           }));

  srv.Post("/api/labels/batch", wrap([sp](const httplib::Request& req, std::uint64_t& seq) {
             const json body = parse_body(req);
             BatchLabelAction a;
             a.selection.class_id = require_field<ClassId>(body, "class");
             a.selection.lo = require_field<double>(body, "lo");
             a.selection.hi = require_field<double>(body, "hi");
             a.target_class = require_field<ClassId>(body, "target_class");
             a.override_mismatch = optional_field<bool>(body, "override", false);
             const auto r = sp->label_batch(a, expected_sequence(body));
             seq = r.sequence;
             return json{{"count", r.count}, {"target_class", a.target_class}};
           }));

  srv.Post("/api/retrain", wrap(
                               [sp](const httplib::Request& req, std::uint64_t&) {
                                 const json body = parse_body(req);
                                 const auto seed = optional_field<std::uint64_t>(body, "seed", 0);
                                 const auto job = sp->start_retrain(seed, expected_sequence(body));
                                 return json{{"job_id", job}, {"status", "training"}};
                               },
                               202));

  srv.Post("/api/retrain/cancel", wrap([sp](const httplib::Request&, std::uint64_t&) {
             return json{{"cancelled", sp->cancel_retrain()}};
           }));

  srv.Post("/api/measure", wrap([sp](const httplib::Request& req, std::uint64_t& seq) {
             const json body = parse_body(req);
             const auto name = require_field<std::string>(body, "measure");
             const auto m = parse_measure(name);
             if (!m) throw Error(errc::kInvalidArgument, "unknown measure '" + name + "'");
             seq = sp->set_measure(*m, expected_sequence(body));
             return json{{"measure", name}};
           }));

  srv.Get("/api/stats", wrap([sp](const httplib::Request&, std::uint64_t& seq) {
            const auto snap = sp->snapshot();
            seq = snap.sequence;
            const auto& ds = sp->dataset();
            const auto st = class_stats(*snap.ledger, ds.num_classes(), snap.scores.get());
            json classes = json::array();
            for (std::size_t c = 0; c < st.per_class.size(); ++c) {
              const auto& cc = st.per_class[c];
              classes.push_back({{"id", c},
                                 {"name", ds.schema().name(static_cast<ClassId>(c))},
                                 {"instance", cc.instance},
                                 {"batch", cc.batch},
                                 {"unlabeled", cc.unlabeled}});
            }
            return json{{"classes", std::move(classes)},
                        {"unpredicted", st.unpredicted},
                        {"total", st.total()}};
          }));

  srv.Get("/api/status", wrap([sp](const httplib::Request&, std::uint64_t& seq) {
            const auto snap = sp->snapshot();
            const auto prog = sp->progress();
            seq = snap.sequence;
            json out{{"trained", snap.trained()},
                     {"status", std::string(to_string(prog.status))},
                     {"job_id", prog.job_id},
                     {"epoch", prog.epoch},
                     {"total_epochs", prog.total_epochs},
                     {"measure", std::string(to_string(snap.measure))}};
            if (!prog.last_error_code.empty())
              out["last_error"] = {{"code", prog.last_error_code}, {"message", prog.last_error}};
            if (snap.last_retrain) {
              const auto& r = *snap.last_retrain;
              out["last_retrain"] = {{"seed", r.seed},
                                     {"instance_examples", r.instance_examples},
                                     {"batch_examples", r.batch_examples},
                                     {"c_min", r.c_min},
                                     {"c_min_partial", r.c_min_partial},
                                     {"final_loss", r.final_loss},
                                     {"seconds", r.seconds}};
            }
            return out;
          }));

  srv.Get("/api/cold_start", wrap([sp](const httplib::Request& req, std::uint64_t&) {
            const std::size_t count =
                req.has_param("count") ? parse_size(req.get_param_value("count"), "count") : 10;
            const std::uint64_t seed =
                req.has_param("seed") ? parse_size(req.get_param_value("seed"), "seed") : 0;
            return json{{"ids", sp->cold_start_sample(count, seed)}};
          }));

  srv.Get("/api/export", [sp](const httplib::Request&, httplib::Response& res) {
    try {
      const auto records = sp->export_records();
      res.status = 200;
      res.set_header("Content-Disposition", "attachment; filename=\"labels.csv\"");
      res.set_content(export_csv_string(records), "text/csv");
    } catch (const Error& e) {
      send_json(res, http_status_for(e.code()),
                envelope_error(e.code(), e.what(), sp->snapshot().sequence));
    }
  });

  srv.Get(R"(/images/(.+))", [sp](const httplib::Request& req, httplib::Response& res) {
    const auto& ds = sp->dataset();
    const std::string id = req.matches[1];
    auto fail = [&](const std::string& code, const std::string& msg) {
      send_json(res, http_status_for(code), envelope_error(code, msg, sp->snapshot().sequence));
    };
    const auto index = ds.index_of(id);
    if (!index) return fail(errc::kUnknownId, "unknown instance id '" + id + "'");
    const auto& ref = ds.image_ref(*index);
    if (ref.empty()) return fail(errc::kNotFound, "instance '" + id + "' has no image");
    std::error_code ec;
    const auto root = std::filesystem::weakly_canonical(ds.images_root(), ec);
    const auto path = std::filesystem::weakly_canonical(ds.images_root() / ref, ec);
    const auto rel = path.lexically_relative(root);
    if (ec || rel.empty() || *rel.begin() == "..")
      return fail(errc::kNotFound, "image for '" + id + "' is outside the image directory");
    std::ifstream in(path, std::ios::binary);
    if (!in) return fail(errc::kNotFound, "image file for '" + id + "' is missing");
    std::ostringstream buf;
    buf << in.rdbuf();
    res.status = 200;
    res.set_content(buf.str(), content_type_for(path));
  });

  if (options_.ui_dir) {
    if (!srv.set_mount_point("/", options_.ui_dir->string()))
      throw Error(errc::kIo, "UI directory " + options_.ui_dir->string() + " does not exist");
  }
}

}  // namespace cvil
