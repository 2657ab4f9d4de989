#include "confseg/service.hpp"

#include <algorithm>
#include <stdexcept>

#include <httplib.h>
#include <json.hpp>

namespace confseg {

namespace fs = std::filesystem;
using nlohmann::json;

bool valid_image_id(std::string_view id) noexcept {
    if (id.empty() || id.size() > 64) return false;
    return std::all_of(id.begin(), id.end(), [](char c) {
        return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-';
    });
}

AnnotationStore::AnnotationStore(fs::path data_dir) : data_dir_(std::move(data_dir)) {
    if (!fs::is_directory(data_dir_ / "images")) {
        throw std::runtime_error("annotation data dir has no images/ directory: " + data_dir_.string());
    }
    fs::create_directories(data_dir_ / "labels");
}

fs::path AnnotationStore::image_path(const std::string& id) const { return data_dir_ / "images" / (id + ".pgm"); }
fs::path AnnotationStore::label_path(const std::string& id) const { return data_dir_ / "labels" / (id + ".cmap"); }

std::shared_ptr<AnnotationStore::Session> AnnotationStore::session(const std::string& id) const {
    if (!valid_image_id(id)) return nullptr;
    std::shared_ptr<Session> s;
    {
        std::lock_guard lock(sessions_mutex_);
        auto& slot = sessions_[id];
        if (!slot) slot = std::make_shared<Session>();
        s = slot;
    }
    std::lock_guard lock(s->write_mutex);
    if (!s->loaded) {
        std::error_code ec;
        if (!fs::is_regular_file(image_path(id), ec)) {
            std::lock_guard map_lock(sessions_mutex_);
            sessions_.erase(id);
            return nullptr;
        }
        const auto img = load_pgm(image_path(id));
        s->width = img.width;
        s->height = img.height;
        if (fs::is_regular_file(label_path(id), ec)) {
            s->bytes = std::make_shared<const std::vector<std::uint8_t>>(read_file_bytes(label_path(id)));
            s->has_label = true;
            s->revision = 1;
        } else {
            s->bytes = std::make_shared<const std::vector<std::uint8_t>>(encode_cmap(ConfidenceMap(img.width, img.height)));
        }
        s->loaded = true;
    }
    return s;
}

std::vector<ImageInfo> AnnotationStore::list_images() const {
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(data_dir_ / "images")) {
        if (!entry.is_regular_file() || entry.path().extension() != ".pgm") continue;
        auto id = entry.path().stem().string();
        if (valid_image_id(id)) ids.push_back(std::move(id));
    }
    std::sort(ids.begin(), ids.end());
    std::vector<ImageInfo> out;
    for (const auto& id : ids) {
        if (auto info = image_info(id)) out.push_back(std::move(*info));
    }
    return out;
}

std::optional<ImageInfo> AnnotationStore::image_info(const std::string& id) const {
    const auto s = session(id);
    if (!s) return std::nullopt;
    std::lock_guard lock(s->write_mutex);
    return ImageInfo{id, s->width, s->height, s->has_label, s->revision};
}

std::optional<std::vector<std::uint8_t>> AnnotationStore::image_bytes(const std::string& id) const {
    if (!session(id)) return std::nullopt;
    return read_file_bytes(image_path(id));
}

std::optional<std::vector<std::uint8_t>> AnnotationStore::get_label(const std::string& id, std::uint64_t* revision) const {
    const auto s = session(id);
    if (!s) return std::nullopt;
    std::shared_ptr<const std::vector<std::uint8_t>> bytes;
    {
        std::lock_guard lock(s->write_mutex);
        bytes = s->bytes;
        if (revision) *revision = s->revision;
    }
    return *bytes;
}

PutResult AnnotationStore::put_label(const std::string& id, std::span<const std::uint8_t> body) {
    const auto s = session(id);
    if (!s) return {404, "unknown image id", 0};
    std::optional<ConfidenceMap> cmap;
    try {
        cmap.emplace(decode_cmap(body));
    } catch (const FormatError& e) {
        if (e.code() == FormatErrorCode::ValueOutOfRange) return {422, "value out of range", 0};
        return {422, std::string("invalid cmap: ") + e.what(), 0};
    }
    std::lock_guard lock(s->write_mutex);
    if (cmap->width() != s->width || cmap->height() != s->height) return {422, "dimension mismatch", 0};
    // Store the canonical encoding so GET is bit-exact with the primary writer.
    auto bytes = std::make_shared<const std::vector<std::uint8_t>>(encode_cmap(*cmap));
    write_file_atomic(label_path(id), *bytes);
    s->bytes = std::move(bytes);
    s->has_label = true;
    ++s->revision;
    return {200, "", s->revision};
}

// ---------------------------------------------------------------------------
// HTTP

namespace {

void error_response(httplib::Response& res, int status, const std::string& reason) {
    res.status = status;
    res.set_content(json{{"error", reason}}.dump(), "application/json");
}

json info_json(const ImageInfo& info) {
    return {{"id", info.id}, {"width", info.width}, {"height", info.height}, {"has_label", info.has_label},
            {"revision", info.revision}};
}

}  // namespace

AnnotationServer::AnnotationServer(const ServiceConfig& cfg)
    : cfg_(cfg), store_(cfg.data_dir), server_(std::make_unique<httplib::Server>()) {
    install_routes();
}

AnnotationServer::~AnnotationServer() { stop(); }

void AnnotationServer::install_routes() {
    auto& srv = *server_;
    srv.Get("/api/images", [this](const httplib::Request&, httplib::Response& res) {
        try {
            json arr = json::array();
            for (const auto& info : store_.list_images()) arr.push_back(info_json(info));
            res.set_content(arr.dump(), "application/json");
        } catch (const std::exception& e) {
            error_response(res, 500, e.what());
        }
    });
    srv.Get(R"(/api/images/([^/]+)/meta)", [this](const httplib::Request& req, httplib::Response& res) {
        const auto info = store_.image_info(req.matches[1]);
        if (!info) return error_response(res, 404, "unknown image id");
        res.set_content(info_json(*info).dump(), "application/json");
    });
    srv.Get(R"(/api/images/([^/]+)/raw)", [this](const httplib::Request& req, httplib::Response& res) {
        const auto bytes = store_.image_bytes(req.matches[1]);
        if (!bytes) return error_response(res, 404, "unknown image id");
        res.set_content(std::string(bytes->begin(), bytes->end()), "application/octet-stream");
    });
    srv.Get(R"(/api/labels/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        std::uint64_t revision = 0;
        const auto bytes = store_.get_label(req.matches[1], &revision);
        if (!bytes) return error_response(res, 404, "unknown image id");
        res.set_header("X-Revision", std::to_string(revision));
        res.set_content(std::string(bytes->begin(), bytes->end()), "application/octet-stream");
    });
    srv.Put(R"(/api/labels/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
        const auto* data = reinterpret_cast<const std::uint8_t*>(req.body.data());
        const auto r = store_.put_label(req.matches[1], std::span<const std::uint8_t>(data, req.body.size()));
        if (r.status != 200) return error_response(res, r.status, r.reason);
        res.set_content(json{{"id", std::string(req.matches[1])}, {"revision", r.revision}}.dump(), "application/json");
    });
    srv.Get("/api/channels", [](const httplib::Request&, httplib::Response& res) {
        json arr = json::array();
        for (auto name : kChannelNames) arr.push_back(std::string(name));
        res.set_content(json{{"channels", arr}, {"levels", kThresholdLevels}}.dump(), "application/json");
    });
    if (!cfg_.static_dir.empty()) {
        if (!srv.set_mount_point("/", cfg_.static_dir.string())) {
            throw std::runtime_error("cannot serve static dir " + cfg_.static_dir.string());
        }
    }
}

int AnnotationServer::bind() {
    if (port_ >= 0) return port_;
    if (cfg_.port == 0) {
        port_ = server_->bind_to_any_port(cfg_.bind);
    } else {
        port_ = server_->bind_to_port(cfg_.bind, cfg_.port) ? cfg_.port : -1;
    }
    if (port_ < 0) throw std::runtime_error("cannot bind " + cfg_.bind + ":" + std::to_string(cfg_.port));
    return port_;
}

void AnnotationServer::listen() {
    bind();
    server_->listen_after_bind();
}

void AnnotationServer::stop() {
    if (server_ && server_->is_running()) server_->stop();
}

void AnnotationServer::wait_until_ready() const { server_->wait_until_ready(); }

}  // namespace confseg
