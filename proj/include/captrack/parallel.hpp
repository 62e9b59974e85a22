#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace captrack {

/// Minimal persistent worker pool. Keeping workers alive matters beyond
/// thread-spawn cost: the conv kernels hold large thread_local scratch
/// buffers that die with their thread.
class ThreadPool {
public:
    explicit ThreadPool(int threads) {
        int n = std::max(0, threads - 1);  // caller participates as worker 0
        workers_.reserve(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i) workers_.emplace_back([this] { worker_loop(); });
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lk(mu_);
            stop_ = true;
            ++generation_;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    /// Runs fn(i) for every i in [0, count), blocking until all complete.
    /// Tasks must not call run() reentrantly.
    void run(int count, const std::function<void(int)>& fn) {
        if (count <= 0) return;
        {
            std::lock_guard<std::mutex> lk(mu_);
            fn_ = &fn;
            count_ = count;
            next_.store(0, std::memory_order_relaxed);
            pending_ = count;
            ++generation_;
        }
        cv_.notify_all();
        work_until_done();
        std::unique_lock<std::mutex> lk(mu_);
        done_cv_.wait(lk, [this] { return pending_ == 0; });
        fn_ = nullptr;
    }

private:
    void work_until_done() {
        for (;;) {
            int i = next_.fetch_add(1, std::memory_order_relaxed);
            if (i >= count_) break;
            (*fn_)(i);
            std::lock_guard<std::mutex> lk(mu_);
            if (--pending_ == 0) done_cv_.notify_all();
        }
    }

    void worker_loop() {
        uint64_t seen = 0;
        for (;;) {
            {
                std::unique_lock<std::mutex> lk(mu_);
                cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
                seen = generation_;
                if (stop_) return;
            }
            work_until_done();
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mu_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(int)>* fn_ = nullptr;
    std::atomic<int> next_{0};
    int count_ = 0;
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace captrack
