#include "tfn/parallel.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

namespace tfn {
namespace {

std::size_t initial_thread_count() {
  if (const char* env = std::getenv("TFN_THREADS")) {
    try {
      const long value = std::stol(env);
      if (value >= 1) return static_cast<std::size_t>(value);
    } catch (const std::exception&) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

thread_local bool inside_parallel_region = false;

class Pool {
 public:
  explicit Pool(std::size_t workers) { resize(workers); }
  ~Pool() { stop(); }

  std::size_t size() const { return size_; }

  void resize(std::size_t workers) {
    stop();
    size_ = std::max<std::size_t>(1, workers);
    shutdown_ = false;
    for (std::size_t w = 1; w < size_; ++w) {
      threads_.emplace_back([this, w] { worker_loop(w); });
    }
  }

  void run(std::size_t count,
           const std::function<void(std::size_t, std::size_t, std::size_t)>& body) {
    const std::size_t workers = std::min(size_, count);
    if (workers <= 1) {
      inside_parallel_region = true;
      body(0, count, 0);
      inside_parallel_region = false;
      return;
    }
    std::unique_lock lock(mutex_);
    body_ = &body;
    count_ = count;
    active_ = workers;
    pending_ = workers - 1;
    error_ = nullptr;
    ++generation_;
    lock.unlock();
    wake_.notify_all();

    run_chunk(0);

    lock.lock();
    done_.wait(lock, [this] { return pending_ == 0; });
    body_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void run_chunk(std::size_t worker) {
    const std::size_t begin = worker * count_ / active_;
    const std::size_t end = (worker + 1) * count_ / active_;
    inside_parallel_region = true;
    try {
      if (begin < end) (*body_)(begin, end, worker);
    } catch (...) {
      std::lock_guard guard(mutex_);
      if (!error_) error_ = std::current_exception();
    }
    inside_parallel_region = false;
  }

  void worker_loop(std::size_t worker) {
    std::size_t seen = 0;
    for (;;) {
      std::unique_lock lock(mutex_);
      wake_.wait(lock, [&] { return shutdown_ || generation_ != seen; });
      if (shutdown_) return;
      seen = generation_;
      const bool participates = worker < active_;
      lock.unlock();
      if (!participates) continue;
      run_chunk(worker);
      lock.lock();
      if (--pending_ == 0) done_.notify_one();
    }
  }

  void stop() {
    {
      std::lock_guard guard(mutex_);
      shutdown_ = true;
    }
    wake_.notify_all();
    for (auto& t : threads_) t.join();
    threads_.clear();
  }

  std::size_t size_ = 1;
  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t, std::size_t, std::size_t)>* body_ = nullptr;
  std::size_t count_ = 0;
  std::size_t active_ = 0;
  std::size_t pending_ = 0;
  std::size_t generation_ = 0;
  bool shutdown_ = false;
  std::exception_ptr error_;
};

Pool& pool() {
  static Pool instance(initial_thread_count());
  return instance;
}

std::mutex& pool_mutex() {
  static std::mutex m;
  return m;
}

}  // namespace

std::size_t num_threads() { return pool().size(); }

void set_num_threads(std::size_t count) {
  std::lock_guard guard(pool_mutex());
  pool().resize(count);
}

void parallel_for(std::size_t count,
                  const std::function<void(std::size_t, std::size_t, std::size_t)>& body) {
  if (count == 0) return;
  if (inside_parallel_region) {
    body(0, count, 0);
    return;
  }
  std::lock_guard guard(pool_mutex());
  pool().run(count, body);
}

}  // namespace tfn
