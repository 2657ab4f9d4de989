#pragma once

// Annotation service: serves phantom/clinical frames and persists the
// per-pixel confidence maps painted in the browser tool.
//
// Data directory layout:
//   <data>/images/<id>.pgm    frames (read only)
//   <data>/labels/<id>.cmap   confidence maps, written by PUT

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "confseg/dataio.hpp"

namespace httplib {
class Server;
}

namespace confseg {

/// Ids are 1-64 characters of [A-Za-z0-9_-].
bool valid_image_id(std::string_view id) noexcept;

struct ImageInfo {
    std::string id;
    std::size_t width = 0;
    std::size_t height = 0;
    bool has_label = false;
    std::uint64_t revision = 0;
};

struct PutResult {
    int status = 200;  // 200, 404 or 422
    std::string reason;
    std::uint64_t revision = 0;
};

class AnnotationStore {
public:
    /// Creates <data>/labels if missing.  Throws if <data>/images is not a directory.
    explicit AnnotationStore(std::filesystem::path data_dir);

    /// Sorted by id.
    std::vector<ImageInfo> list_images() const;
    std::optional<ImageInfo> image_info(const std::string& id) const;
    std::optional<std::vector<std::uint8_t>> image_bytes(const std::string& id) const;

    /// Encoded .cmap of the last accepted write; an all-zero map of the image's
    /// size when the image has no label yet.  Empty for unknown ids.
    std::optional<std::vector<std::uint8_t>> get_label(const std::string& id, std::uint64_t* revision = nullptr) const;
    PutResult put_label(const std::string& id, std::span<const std::uint8_t> body);

private:
    struct Session {
        std::mutex write_mutex;
        std::size_t width = 0;
        std::size_t height = 0;
        bool loaded = false;
        std::shared_ptr<const std::vector<std::uint8_t>> bytes;
        std::uint64_t revision = 0;
        bool has_label = false;
    };

    /// Null for unknown ids.  Loads dimensions and any stored label on first use.
    std::shared_ptr<Session> session(const std::string& id) const;
    std::filesystem::path image_path(const std::string& id) const;
    std::filesystem::path label_path(const std::string& id) const;

    std::filesystem::path data_dir_;
    mutable std::mutex sessions_mutex_;
    mutable std::map<std::string, std::shared_ptr<Session>> sessions_;
};

struct ServiceConfig {
    std::filesystem::path data_dir;
    /// Built UI assets mounted at "/"; empty to disable.
    std::filesystem::path static_dir;
    std::string bind = "127.0.0.1";
    /// 0 picks a free port.
    int port = 8080;
};

class AnnotationServer {
public:
    explicit AnnotationServer(const ServiceConfig& cfg);
    ~AnnotationServer();
    AnnotationServer(const AnnotationServer&) = delete;
    AnnotationServer& operator=(const AnnotationServer&) = delete;

    /// Binds the socket and returns the port.  Throws on failure.
    int bind();
    /// Blocks until stop().  Calls bind() first if needed.
    void listen();
    void stop();
    void wait_until_ready() const;
    int port() const noexcept { return port_; }
    AnnotationStore& store() noexcept { return store_; }

private:
    void install_routes();

    ServiceConfig cfg_;
    AnnotationStore store_;
    std::unique_ptr<httplib::Server> server_;
    int port_ = -1;
};

}  // namespace confseg
